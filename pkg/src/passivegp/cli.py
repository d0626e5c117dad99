"""Command line front end wiring the pipeline into reproducible runs.

Commands: gen-data, train, bound, synth-gains, certify, simulate,
verify, field.  Exit codes: 0 ok, 1 config error, 2 certification
failure, 3 audit failure, 4 missing input artifact.
"""

import argparse
import os
import sys

import numpy as np

from . import audit as auditing
from . import bounds, dynamics, gp, passivation
from .config import (ConfigError, RunConfig, build_domain, build_gains,
                     build_hypers, build_system, build_x0_list, subseed, validate)
from .errors import ContractViolation
from .textio import g17

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CERT = 2
EXIT_AUDIT = 3
EXIT_MISSING = 4


class MissingArtifact(Exception):
    pass


def _require(path):
    if path is None or not os.path.exists(path):
        raise MissingArtifact(str(path))
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    system = build_system(cfg)
    domain = build_domain(cfg)
    m = args.m if args.m is not None else cfg.get_int("data", "m")
    noise = np.full(system.n, cfg.get_float("data", "noise_std"))
    literal = cfg.get_choice("data", "target_sign", {"standard", "literal"}) == "literal"
    data = dynamics.generate_training_data(
        system, domain, m, noise, seed=subseed(cfg.seed, "train-data"),
        literal_sign=literal)
    dynamics.write_training_csv(data, args.out)
    print(f"wrote {data.size} training pairs (lattice {data.lattice_shape}) to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg):
    _require(args.data)
    system = build_system(cfg)
    noise = cfg.get_float("gp", "noise_std")
    data = dynamics.read_training_csv(args.data, noise_std=np.full(system.n, noise))
    mode = cfg.get_choice("gp", "mode", {"fixed", "optimize"})
    if mode == "fixed":
        hypers = build_hypers(cfg, data.input_dim, data.output_dim)
    else:
        opt = gp.OptimizerConfig(
            restarts=cfg.get_int("gp", "restarts"),
            max_iter=cfg.get_int("gp", "max_iter"),
            grad_tol=cfg.get_float("gp", "grad_tol"),
            seed=subseed(cfg.seed, "gp-optimize"))
        hypers = gp.optimize_hyperparameters(data, opt)
    model = gp.fit(data, hypers)
    gp.save_model(model, args.out)
    mean = np.atleast_2d(gp.predict_mean(model, data.inputs))
    resid = np.max(np.abs(mean - data.targets))
    for i, hyp in enumerate(hypers):
        lml, _ = gp.log_marginal_likelihood(data, hyp, i)
        print(f"output {i}: lml = {g17(lml)}  sigma_f^2 = {g17(hyp.signal_variance)}  "
              f"lengthscales = {' '.join(g17(v) for v in hyp.lengthscales)}  "
              f"sigma_n = {g17(hyp.noise_std)}")
    print(f"max interpolation residual {g17(resid)}; model written to {args.out}")
    return EXIT_OK


def _bound_config(cfg, domain, model):
    candidate, _ = domain.query_grid(
        [int(v) for v in cfg.get_vector("bound", "candidate_resolution")])
    rkhs = None
    if cfg.get_choice("bound", "rkhs_mode", {"surrogate", "user"}) == "user":
        rkhs = cfg.get_vector("bound", "rkhs_norms")
        if rkhs.size != model.output_dim:
            raise ConfigError("bound.rkhs_norms: one value per output dimension")
    budget = cfg.get_optional("bound", "budget")
    return bounds.BoundConfig(
        delta=cfg.get_float("bound", "delta"),
        candidate_grid=candidate,
        rkhs_norms=rkhs,
        budget=None if budget is None else int(budget),
        sup_resolution=cfg.get_int("bound", "sup_resolution"))


def cmd_bound(args, cfg):
    _require(args.model)
    model = gp.load_model(args.model)
    domain = build_domain(cfg)
    bound = bounds.compute_error_bound(model, domain, _bound_config(cfg, domain, model))
    bounds.save_bound_report(bound, args.out)
    print(f"delta_bar = {g17(bound.delta_bar)} at confidence {g17(bound.delta)}; "
          f"report written to {args.out}")
    return EXIT_OK


def cmd_synth_gains(args, cfg):
    c = cfg.get_float("gains", "c")
    target = cfg.get_float("gains", "lambda_target")
    seed_kd = cfg.get_vector("gains", "kd")
    seed_kp = cfg.get_vector("gains", "kp")
    n = int(round(np.sqrt(seed_kd.size)))
    gains = passivation.synthesize_gains(
        c, target, seed_kd.reshape(n, n), seed_kp.reshape(n, n))
    lam = passivation.lambda_min_eig(gains)
    lines = ["passivegp-gains v1", f"n {gains.n}",
             "Kd " + " ".join(g17(v) for v in gains.Kd.ravel()),
             "Kp " + " ".join(g17(v) for v in gains.Kp.ravel()),
             "c " + g17(gains.c), "lambda_min " + g17(lam)]
    with open(args.out, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"synthesized gains with lambda_min = {g17(lam)} >= {g17(target)}; "
          f"written to {args.out}")
    return EXIT_OK


def cmd_certify(args, cfg):
    _require(args.model)
    model = gp.load_model(args.model)
    domain = build_domain(cfg)
    gains = build_gains(cfg)
    override = args.delta_bar_override
    if override is None:
        raw = cfg.get_optional("bound", "delta_bar_override")
        override = None if raw is None else float(raw)
    delta = cfg.get_float("bound", "delta")
    n = model.output_dim
    if args.bound is not None:
        bound = bounds.load_bound_report(_require(args.bound))
    elif override is not None:
        nan = np.full(n, np.nan)
        bound = bounds.ModelErrorBound(
            delta_vec=nan, gammas=nan, rkhs_norms=nan, delta_bar=float(override),
            delta=delta, delta_sc=bounds.delta_sc_from_delta(delta, n),
            m=model.size, grid_shape=(), argmax_point=np.array([]))
    else:
        bound = bounds.compute_error_bound(model, domain, _bound_config(cfg, domain, model))
    if override is not None and args.bound is not None:
        bound = bounds.ModelErrorBound(
            delta_vec=bound.delta_vec, gammas=bound.gammas,
            rkhs_norms=bound.rkhs_norms, delta_bar=float(override),
            delta=bound.delta, delta_sc=bound.delta_sc, m=bound.m,
            grid_shape=bound.grid_shape, argmax_point=bound.argmax_point)

    cert = passivation.certify(model, bound, gains, domain,
                               kd_bar=cfg.get_float("gains", "kd_bar"),
                               kp_bar=cfg.get_float("gains", "kp_bar"))
    passivation.save_certificate(cert, args.out)
    print(f"delta_bar = {g17(cert.delta_bar)}  lambda_min = {g17(cert.lambda_min)}  "
          f"radius = {g17(cert.radius)}  verdict = {'pass' if cert.verdict else 'fail'}")
    if not cert.verdict:
        for reason in cert.reasons:
            print(f"certification failure: {reason}", file=sys.stderr)
        return EXIT_CERT
    return EXIT_OK


def cmd_simulate(args, cfg):
    _require(args.model)
    model = gp.load_model(args.model)
    system = build_system(cfg)
    domain = build_domain(cfg)
    gains = build_gains(cfg)
    x0_list = build_x0_list(cfg, domain)
    t_final = cfg.get_float("sim", "t_final")
    dt = cfg.get_float("sim", "dt")
    mode = cfg.get_choice("sim", "loop_mode", {"solve", "delayed"})
    factor = cfg.get_float("sim", "safety_factor")
    center = 0.5 * (domain.dx_lo + domain.dx_hi)
    half = 0.5 * (domain.dx_hi - domain.dx_lo)
    safety = (center - factor * half, center + factor * half)
    os.makedirs(args.out_dir, exist_ok=True)
    for k, x0 in enumerate(x0_list):
        traj = dynamics.simulate(system, model, gains, None, x0, t_final, dt,
                                 mode=mode, safety_box=safety)
        path = os.path.join(args.out_dir, f"traj_{k:03d}.csv")
        dynamics.write_trajectory_csv(traj, path)
        note = " (exited safety box)" if traj.exited else ""
        print(f"trajectory {k}: {traj.times.size} samples from "
              f"({' '.join(g17(v) for v in x0)}) -> {path}{note}")
    return EXIT_OK


def cmd_verify(args, cfg):
    _require(args.model)
    _require(args.cert)
    model = gp.load_model(args.model)
    cert = passivation.load_certificate(args.cert)
    system = build_system(cfg)
    domain = build_domain(cfg)
    gains = cert.gains
    tol = cfg.get_float("audit", "tolerance")

    traj_dir = _require(args.traj_dir)
    names = sorted(f for f in os.listdir(traj_dir) if f.endswith(".csv"))
    if not names:
        raise MissingArtifact(f"{traj_dir} contains no trajectory CSVs")
    trajs = [dynamics.read_trajectory_csv(os.path.join(traj_dir, f)) for f in names]

    states = np.vstack([t.states for t in trajs])
    xdot2 = np.vstack([t.xdot2 for t in trajs])
    u_ex = np.vstack([t.u_ex for t in trajs])

    # dissipation is also checked on a state grid with the loop resolved
    grid_states, _ = domain.state_grid(cfg.get_int("audit", "state_grid"))
    field = dynamics.vector_field(system, model, gains, grid_states, mode="closed-loop")
    n = system.n
    grid_x = field[:, :2 * n]
    grid_a = field[:, 3 * n:]
    grid_uex = np.zeros((grid_x.shape[0], n))

    report = auditing.semipassivity_audit(
        np.vstack([states, grid_x]), np.vstack([xdot2, grid_a]),
        np.vstack([u_ex, grid_uex]), cert, gains, domain, tolerance=tol)

    contained = [auditing.xdot_containment_check(t, domain) for t in trajs]
    report.xdot_containment = float(min(contained))

    # empirical model error on seeded random queries in the domain
    rng = np.random.default_rng(subseed(cfg.seed, "error-grid"))
    npts = cfg.get_int("audit", "error_points")
    lo = np.concatenate([domain.dxdot_lo, domain.dx_lo])
    hi = np.concatenate([domain.dxdot_hi, domain.dx_hi])
    queries = rng.uniform(lo, hi, size=(npts, lo.size)).T
    dv = None
    if args.bound is not None:
        dv = bounds.load_bound_report(_require(args.bound)).delta_vec
    if dv is not None and np.all(np.isfinite(dv)):
        coverage = auditing.model_error_empirical(model, system, dv, queries)
        report.error_coverage = coverage.coverage
    else:
        # no multiplier record available: compare against the constant budget
        coverage = auditing.model_error_empirical(
            model, system, np.zeros(n), queries, delta_bar=cert.delta_bar)
        report.error_coverage = coverage.within_delta_bar / coverage.samples

    ok = report.verdict and report.xdot_containment == 1.0
    auditing.save_audit_report(report, args.out)
    print(f"dissipation verdict: {'pass' if report.verdict else 'fail'} "
          f"({report.dissipation_violations}/{report.outside_ball} violations, "
          f"max gap {g17(report.max_violation)})")
    print(f"xdot containment: {g17(report.xdot_containment)}; "
          f"error coverage: {g17(report.error_coverage)}")
    print(f"report written to {args.out}")
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_field(args, cfg):
    system = build_system(cfg)
    domain = build_domain(cfg)
    if args.mode == "closed-loop":
        _require(args.model)
        model = gp.load_model(args.model)
        gains = build_gains(cfg)
    else:
        model, gains = None, build_gains(cfg)
    if args.x1 is not None and args.x2 is not None:
        axes = [np.linspace(args.x1[0], args.x1[1], args.res),
                np.linspace(args.x2[0], args.x2[1], args.res)]
        from .domain import cartesian_columns
        states = cartesian_columns(axes)
    else:
        states, _ = domain.state_grid(args.res)
    rows = dynamics.vector_field(system, model, gains, states, mode=args.mode)
    dynamics.write_field_csv(rows, system.n, args.out)
    print(f"wrote {rows.shape[0]} field rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", default=None, help="INI configuration file")
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--override", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="passivegp",
        description="GP feed-forward compensation with a semi-passivity certificate")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate lattice training data")
    _add_common(p)
    p.add_argument("--m", type=int, default=None, help="number of training pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="fit the GP model")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("bound", help="compute the model-error bound")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bound)

    p = subs.add_parser("synth-gains", help="synthesize gains for a target margin")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gains)

    p = subs.add_parser("certify", help="assemble the passivity certificate")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bound", default=None, help="bound report to reuse")
    p.add_argument("--delta-bar-override", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_certify)

    p = subs.add_parser("simulate", help="run closed-loop trajectories")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("verify", help="audit the certificate numerically")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cert", required=True)
    p.add_argument("--traj-dir", required=True)
    p.add_argument("--bound", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_verify)

    p = subs.add_parser("field", help="export a phase-plane vector field")
    _add_common(p)
    p.add_argument("--mode", choices=("open-loop", "closed-loop"), default="open-loop")
    p.add_argument("--model", default=None)
    p.add_argument("--x1", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--x2", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    p.add_argument("--res", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_field)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.override)
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        validate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
