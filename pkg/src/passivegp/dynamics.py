"""Plants, training-data generation and closed-loop simulation.

The plant interface covers second-order systems x1' = x2, x2' = f(x, u)
whose input map is invertible on the working domain, so the drift
f~(x, x2') = f^-1(x, x2') + x2' can be learned from data.  The composite
control u = u_c + u_gp - u_ex feeds the learned mean back as
feed-forward compensation; because u_gp depends on the acceleration, a
small implicit solve closes the algebraic loop at every derivative
evaluation of the fixed-step RK4 integrator.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import gp
from .domain import DomainSpec
from .errors import ContractViolation
from .gp import TrainingSet
from .passivation import GainSet, storage_value
from .textio import g17

LOOP_TOL = 1e-10
LOOP_MAX_ITER = 50


# ---------------------------------------------------------------------------
# plants
# ---------------------------------------------------------------------------

class SystemDynamics:
    """Second-order plant with an invertible input map.

    Subclasses set ``n`` and implement ``f`` and ``f_inverse`` as maps on
    arrays of shape (2n,) / (n,).  The round trip
    f(x, f_inverse(x, a)) = a must hold on the working domain.
    """

    n = None

    def f(self, x, u):
        raise NotImplementedError

    def f_inverse(self, x, xdot2):
        raise NotImplementedError

    def drift(self, x, xdot2):
        """Learned quantity f~(x, xdot2) = f_inverse(x, xdot2) + xdot2."""
        return self.f_inverse(x, xdot2) + np.atleast_1d(np.asarray(xdot2, dtype=float))


@dataclass(frozen=True)
class DuffingParams:
    """Stiffness and damping of the modified Duffing benchmark."""

    alpha: float = -0.1
    beta: float = -0.1
    gamma_damp: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma_damp"):
            if not np.isfinite(getattr(self, name)):
                raise ContractViolation(f"{name} must be finite")


def duffing_f(x, u, params: DuffingParams = DuffingParams()) -> float:
    """Duffing acceleration x2' = cbrt(u) - g x2 - a x1 - b x1^3 + 1.

    The cube root is the real signed root, which keeps the input map a
    global bijection.
    """
    x = np.asarray(x, dtype=float).ravel()
    return float(np.cbrt(u) - params.gamma_damp * x[1]
                 - params.alpha * x[0] - params.beta * x[0] ** 3 + 1.0)


def duffing_f_inverse(x, xdot2, params: DuffingParams = DuffingParams()) -> float:
    """Input producing a requested acceleration: the cubed residual."""
    x = np.asarray(x, dtype=float).ravel()
    return float((xdot2 + params.gamma_damp * x[1] + params.alpha * x[0]
                  + params.beta * x[0] ** 3 - 1.0) ** 3)


class DuffingOscillator(SystemDynamics):
    """Modified Duffing oscillator with a non-affine (cube root) input."""

    n = 1

    def __init__(self, params: DuffingParams = DuffingParams()):
        self.params = params

    def f(self, x, u):
        return np.array([duffing_f(x, float(np.asarray(u).ravel()[0]), self.params)])

    def f_inverse(self, x, xdot2):
        return np.array([duffing_f_inverse(x, float(np.asarray(xdot2).ravel()[0]),
                                           self.params)])


# ---------------------------------------------------------------------------
# control pieces
# ---------------------------------------------------------------------------

def passive_output(x, c: float) -> np.ndarray:
    """Passive output y_ex = c x1 + x2."""
    if c <= 0.0:
        raise ContractViolation("c must be positive")
    x = np.asarray(x, dtype=float).ravel()
    n = x.size // 2
    return c * x[:n] + x[n:]


def pd_control(x, gains: GainSet) -> np.ndarray:
    """Feedback law u_c = K_d x2 + K_p x1."""
    x = np.asarray(x, dtype=float).ravel()
    n = gains.n
    if x.size != 2 * n:
        raise ContractViolation(f"state must have dimension {2 * n}")
    return gains.Kd @ x[n:] + gains.Kp @ x[:n]


def _mean_and_jacobian(model, q, n):
    """Feed-forward mean and its jacobian w.r.t. the acceleration block.

    ``model`` may be a fitted GPModel, any object with a
    ``mean_and_jacobian(q)`` method, or None for a zero prior.
    """
    if model is None:
        return np.zeros(n), np.zeros((n, n))
    if hasattr(model, "mean_and_jacobian"):
        mean, jac = model.mean_and_jacobian(q)
        return np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(jac, float))[:, :n]
    mean, jac = gp.predict_mean_jacobian(model, q)
    return mean, jac[:, :n]


def gp_feedforward(model, x, xdot2_est, domain: DomainSpec = None) -> np.ndarray:
    """Feed-forward input: predicted mean at the stacked (xdot2, x) query.

    When a domain is given and the query leaves it, a warning is issued
    because the certificate does not cover the excursion.
    """
    x = np.asarray(x, dtype=float).ravel()
    a = np.atleast_1d(np.asarray(xdot2_est, dtype=float))
    q = np.concatenate([a, x])
    if domain is not None and not domain.contains_query(q, tol=1e-12):
        warnings.warn("feed-forward query outside the certified domain", RuntimeWarning)
    mean, _ = _mean_and_jacobian(model, q, a.size)
    return mean


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

def generate_training_data(sys: SystemDynamics, domain: DomainSpec, m: int,
                           noise_std, seed: int = 0,
                           literal_sign: bool = False) -> TrainingSet:
    """Sample (xdot2, x) on a regular lattice and record noisy drift targets.

    The lattice is near-cubic: the smallest per-axis count whose power
    covers m, truncated to exactly m points in C order.  Targets are
    y = f_inverse(x, xdot2) + xdot2 + noise; ``literal_sign`` flips the
    acceleration term to u - xdot2 for comparison runs.
    """
    if m < 1:
        raise ContractViolation("m must be positive")
    n = sys.n
    if domain.n != n:
        raise ContractViolation("domain and plant dimensions disagree")
    lo = np.concatenate([domain.dxdot_lo, domain.dx_lo])
    hi = np.concatenate([domain.dxdot_hi, domain.dx_hi])
    d = lo.size

    k = max(1, int(np.floor(m ** (1.0 / d))))
    while k ** d < m:
        k += 1
    axes = []
    for ax in range(d):
        if k == 1:
            axes.append(np.array([0.5 * (lo[ax] + hi[ax])]))
        else:
            axes.append(np.linspace(lo[ax], hi[ax], k))
    mesh = np.meshgrid(*axes, indexing="ij")
    Q = np.vstack([g.ravel() for g in mesh])[:, :m]       # (d, m)

    sign = -1.0 if literal_sign else 1.0
    Y = np.empty((m, n))
    for j in range(m):
        a, x = Q[:n, j], Q[n:, j]
        u = sys.f_inverse(x, a)
        Y[j] = u + sign * a
    rng = np.random.default_rng(seed)
    noise = np.atleast_1d(np.asarray(noise_std, dtype=float))
    Y += rng.normal(size=(m, n)) * noise[None, :]
    return TrainingSet(inputs=Q, targets=Y, noise_std=noise,
                       lattice_shape=(k,) * d)


# ---------------------------------------------------------------------------
# algebraic loop
# ---------------------------------------------------------------------------

def _finv_jacobian(sys, x, a, h=1e-6):
    """Central-difference jacobian of f_inverse w.r.t. the acceleration."""
    n = a.size
    J = np.empty((n, n))
    for k in range(n):
        step = h * max(1.0, abs(a[k]))
        e = np.zeros(n)
        e[k] = step
        J[:, k] = (sys.f_inverse(x, a + e) - sys.f_inverse(x, a - e)) / (2.0 * step)
    return J


def resolve_xdot2(sys, model, gains, x, u_ex, seed_xdot2,
                  tol=LOOP_TOL, max_iter=LOOP_MAX_ITER):
    """Close the algebraic loop between the acceleration and u_gp.

    The loop is solved in input-consistency form: find a with

        r(a) = f_inverse(x, a) - (u_c(x) + u_gp(x, a) - u_ex) = 0,

    by a damped Newton iteration seeded with the previous acceleration.
    This form is well conditioned exactly when the compensation is good
    (r'(a) is then close to -I), where a plain substitution iteration
    diverges.  Returns (xdot2, u_gp, converged); the acceleration is the
    plant response f(x, u) to the actually applied input, so the result
    is always dynamically consistent.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = sys.n
    u_c = pd_control(x, gains)
    u_ex = np.atleast_1d(np.asarray(u_ex, dtype=float))
    a = np.atleast_1d(np.asarray(seed_xdot2, dtype=float)).copy()

    def residual(a_try):
        q = np.concatenate([a_try, x])
        mean, dmean = _mean_and_jacobian(model, q, n)
        r = sys.f_inverse(x, a_try) - (u_c + mean - u_ex)
        return r, mean, dmean

    r, ugp, dmean = residual(a)
    converged = False
    for _ in range(max_iter):
        rnorm = np.max(np.abs(r))
        if rnorm <= tol:
            converged = True
            break
        J = _finv_jacobian(sys, x, a) - dmean
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J + 1e-12 * np.eye(n), -r, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        # damp until the residual shrinks
        t = 1.0
        accepted = False
        for _ in range(12):
            a_try = a + t * step
            r_try, ugp_try, dmean_try = residual(a_try)
            if np.max(np.abs(r_try)) < rnorm:
                a, r, ugp, dmean = a_try, r_try, ugp_try, dmean_try
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        if np.max(np.abs(t * step)) <= tol:
            converged = True
            break

    u = u_c + ugp - u_ex
    xdot2 = sys.f(x, u)
    return xdot2, ugp, converged


# ---------------------------------------------------------------------------
# stepping and simulation
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    """Inputs and acceleration realized at the step's sample time."""

    xdot2: np.ndarray
    u: np.ndarray
    u_c: np.ndarray
    u_gp: np.ndarray
    u_ex: np.ndarray
    converged: bool


def closed_loop_step(sys, model, gains, u_ex, state, xdot2_prev, dt,
                     mode: str = "solve"):
    """Advance one RK4 step of the compensated closed loop.

    mode "solve" closes the algebraic loop at every stage evaluation,
    each solve seeded by the previous stage's result; mode "delayed"
    freezes u_gp at the query (xdot2_prev, x) for the whole step.
    Returns (next_state, xdot2_seed_for_next_step, StepRecord).
    """
    if dt <= 0.0:
        raise ContractViolation("dt must be positive")
    state = np.asarray(state, dtype=float).ravel()
    n = sys.n
    u_ex = np.atleast_1d(np.asarray(u_ex, dtype=float))
    seed = np.atleast_1d(np.asarray(xdot2_prev, dtype=float))
    all_ok = True

    if mode == "solve":
        def deriv(x_s, seed_s):
            a, ugp, ok = resolve_xdot2(sys, model, gains, x_s, u_ex, seed_s)
            return np.concatenate([x_s[n:], a]), a, ugp, ok
    elif mode == "delayed":
        q = np.concatenate([seed, state])
        ugp_held, _ = _mean_and_jacobian(model, q, n)

        def deriv(x_s, seed_s):
            u = pd_control(x_s, gains) + ugp_held - u_ex
            a = sys.f(x_s, u)
            return np.concatenate([x_s[n:], a]), a, ugp_held, True
    else:
        raise ContractViolation(f"unknown loop mode {mode!r}")

    k1, a1, ugp1, ok = deriv(state, seed)
    all_ok &= ok
    k2, a2, _, ok = deriv(state + 0.5 * dt * k1, a1)
    all_ok &= ok
    k3, a3, _, ok = deriv(state + 0.5 * dt * k2, a2)
    all_ok &= ok
    k4, a4, _, ok = deriv(state + dt * k3, a3)
    all_ok &= ok
    next_state = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    u_c = pd_control(state, gains)
    record = StepRecord(xdot2=a1, u=u_c + ugp1 - u_ex, u_c=u_c, u_gp=ugp1,
                        u_ex=u_ex.copy(), converged=bool(all_ok))
    return next_state, a4, record


@dataclass
class Trajectory:
    """Uniformly sampled closed-loop run with all control channels."""

    times: np.ndarray          # (N,)
    states: np.ndarray         # (N, 2n)
    xdot2: np.ndarray          # (N, n)
    u: np.ndarray              # (N, n)
    u_c: np.ndarray            # (N, n)
    u_gp: np.ndarray           # (N, n)
    u_ex: np.ndarray           # (N, n)
    V: np.ndarray              # (N,)
    exited: bool = False
    nonconverged_steps: int = 0

    @property
    def n(self) -> int:
        return self.xdot2.shape[1]


def simulate(sys, model, gains, u_ex_signal, x0, t_final, dt,
             mode: str = "solve", safety_box=None) -> Trajectory:
    """Integrate the compensated closed loop from x0 over [0, t_final].

    ``u_ex_signal`` is a callable t -> (n,) or None for zero input.  If
    the state leaves the optional safety box the run is truncated and
    flagged.  All channels (u, u_c, u_gp, u_ex), the realized
    acceleration and the storage value are recorded at every sample.
    """
    if t_final <= 0.0 or dt <= 0.0:
        raise ContractViolation("t_final and dt must be positive")
    x0 = np.asarray(x0, dtype=float).ravel()
    n = sys.n
    steps = int(round(t_final / dt))
    times = np.arange(steps + 1) * dt

    if u_ex_signal is None:
        u_ex_fn = lambda t: np.zeros(n)
    else:
        u_ex_fn = lambda t: np.atleast_1d(np.asarray(u_ex_signal(t), dtype=float))

    states = np.empty((steps + 1, 2 * n))
    xdot2 = np.empty((steps + 1, n))
    u = np.empty((steps + 1, n))
    u_c = np.empty((steps + 1, n))
    u_gp = np.empty((steps + 1, n))
    u_ex_rec = np.empty((steps + 1, n))
    V = np.empty(steps + 1)

    x = x0.copy()
    seed = -pd_control(x, gains) + u_ex_fn(0.0)      # good guess under compensation
    bad = 0
    exited = False
    i = 0
    for i in range(steps):
        states[i] = x
        V[i] = storage_value(x, gains)
        x_next, seed_next, rec = closed_loop_step(
            sys, model, gains, u_ex_fn(times[i]), x, seed, dt, mode=mode)
        xdot2[i], u[i], u_c[i], u_gp[i], u_ex_rec[i] = (
            rec.xdot2, rec.u, rec.u_c, rec.u_gp, rec.u_ex)
        if not rec.converged:
            bad += 1
        x, seed = x_next, seed_next
        if safety_box is not None:
            lo, hi = safety_box
            if np.any(x < lo) or np.any(x > hi):
                exited = True
                i += 1
                break
    else:
        i = steps

    # final sample: resolve once at the terminal state for the records
    states[i] = x
    V[i] = storage_value(x, gains)
    a_fin, ugp_fin, _ = resolve_xdot2(sys, model, gains, x, u_ex_fn(times[i]), seed)
    xdot2[i] = a_fin
    u_c[i] = pd_control(x, gains)
    u_ex_rec[i] = u_ex_fn(times[i])
    u_gp[i] = ugp_fin
    u[i] = u_c[i] + u_gp[i] - u_ex_rec[i]

    last = i + 1
    if bad:
        warnings.warn(f"{bad} of {steps} steps hit the loop iteration cap",
                      RuntimeWarning)
    return Trajectory(times=times[:last], states=states[:last], xdot2=xdot2[:last],
                      u=u[:last], u_c=u_c[:last], u_gp=u_gp[:last],
                      u_ex=u_ex_rec[:last], V=V[:last], exited=exited,
                      nonconverged_steps=bad)


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

def vector_field(sys, model, gains, states, mode: str = "open-loop") -> np.ndarray:
    """Evaluate the phase-plane field at state columns (2n, N).

    Returns rows (x1, x2, xdot1, xdot2).  Open loop applies u = 0;
    closed loop applies the full law with u_ex = 0, closing the
    algebraic loop at every node.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 2:
        raise ContractViolation("states must be a (2n, N) matrix")
    n = sys.n
    if states.shape[0] != 2 * n:
        raise ContractViolation(f"state columns must have dimension {2 * n}")
    N = states.shape[1]
    rows = np.empty((N, 4 * n))
    zero = np.zeros(n)
    for j in range(N):
        x = states[:, j]
        if mode == "open-loop":
            a = sys.f(x, zero)
        elif mode == "closed-loop":
            a, _, _ = resolve_xdot2(sys, model, gains, x, zero,
                                    -pd_control(x, gains))
        else:
            raise ContractViolation(f"unknown field mode {mode!r}")
        rows[j, :2 * n] = x
        rows[j, 2 * n:3 * n] = x[n:]
        rows[j, 3 * n:] = a
    return rows


# ---------------------------------------------------------------------------
# CSV formats
# ---------------------------------------------------------------------------

def _channel_names(base, n):
    if n == 1:
        return [base]
    return [f"{base}_{k + 1}" for k in range(n)]


def write_trajectory_csv(traj: Trajectory, path):
    """One-line header then 17-significant-digit samples."""
    n = traj.n
    header = (["t"] + _channel_names("x1", n) + _channel_names("x2", n)
              + _channel_names("xdot2", n) + _channel_names("u", n)
              + _channel_names("u_c", n) + _channel_names("u_gp", n)
              + _channel_names("u_ex", n) + ["V"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(traj.times.size):
            row = np.concatenate(([traj.times[i]], traj.states[i],
                                  traj.xdot2[i], traj.u[i], traj.u_c[i],
                                  traj.u_gp[i], traj.u_ex[i], [traj.V[i]]))
            fh.write(",".join(g17(v) for v in row) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    """Load a trajectory CSV written by write_trajectory_csv."""
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise ContractViolation(f"{path}: empty trajectory file")
    ncols = len(lines[0].split(","))
    if (ncols - 2) % 7 != 0:
        raise ContractViolation(f"{path}: expected 7n + 2 columns, got {ncols}")
    n = (ncols - 2) // 7
    arr = np.asarray([[float(p) for p in line.split(",")] for line in lines[1:]],
                     dtype=float)
    cols = iter(np.split(arr[:, 1:-1], 7, axis=1))
    states = np.hstack([next(cols), next(cols)])
    return Trajectory(times=arr[:, 0], states=states, xdot2=next(cols),
                      u=next(cols), u_c=next(cols), u_gp=next(cols),
                      u_ex=next(cols), V=arr[:, -1])


def write_field_csv(rows, n, path):
    header = (_channel_names("x1", n) + _channel_names("x2", n)
              + _channel_names("xdot1", n) + _channel_names("xdot2", n))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.asarray(rows, dtype=float):
            fh.write(",".join(g17(v) for v in row) + "\n")


def write_training_csv(data: TrainingSet, path):
    n = data.output_dim
    header = (_channel_names("xdot2", n) + _channel_names("x1", n)
              + _channel_names("x2", n) + _channel_names("y", n))
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for j in range(data.size):
            row = np.concatenate([data.inputs[:, j], data.targets[j]])
            fh.write(",".join(g17(v) for v in row) + "\n")


def read_training_csv(path, noise_std) -> TrainingSet:
    """Load a training CSV; the noise level is supplied by the caller."""
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise ContractViolation(f"{path}: empty training file")
    ncols = len(lines[0].split(","))
    if ncols % 4 != 0:
        raise ContractViolation(f"{path}: expected 4n columns, got {ncols}")
    n = ncols // 4
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != ncols:
            raise ContractViolation(f"{path}:{lineno}: expected {ncols} fields")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ContractViolation(f"{path}:{lineno}: {exc}") from exc
    arr = np.asarray(rows, dtype=float)
    return TrainingSet(inputs=arr[:, :3 * n].T, targets=arr[:, 3 * n:],
                       noise_std=noise_std)
