"""Run configuration: defaults, INI parsing and object builders.

One flat sectioned key=value file drives every command; flags override
file values and the built-in defaults reproduce the Duffing benchmark
scenario.  All randomness derives from the single [run] seed, fanned
out into labeled sub-seeds so the commands stay independent.
"""

import configparser
import hashlib
import io

import numpy as np

from . import gp
from .domain import DomainSpec
from .dynamics import DuffingOscillator, DuffingParams
from .passivation import GainSet, synthesize_gains

# frozen from a marginal-likelihood optimization of the benchmark
# training set (720 lattice points, noise 0.01); see demos/learn_dynamics.py
DUFFING_HYPERS = {
    "signal_variance": 3.8e4,
    "lengthscales": "2.4 1.9 6.0",
    "noise_std": 0.01,
}

DEFAULTS = {
    "run": {"seed": "0"},
    "system": {"name": "duffing", "alpha": "-0.1", "beta": "-0.1",
               "gamma_damp": "0.1"},
    "domain": {"x_min": "-2 -2", "x_max": "2 2", "xdot_min": "-2.55",
               "xdot_max": "4.55", "u_ex_max": "0.1"},
    "data": {"m": "720", "noise_std": "0.01", "target_sign": "standard"},
    "gp": {"mode": "fixed",
           "signal_variance": str(DUFFING_HYPERS["signal_variance"]),
           "lengthscales": DUFFING_HYPERS["lengthscales"],
           "noise_std": str(DUFFING_HYPERS["noise_std"]),
           "restarts": "5", "max_iter": "500", "grad_tol": "1e-6"},
    "bound": {"delta": "0.95", "rkhs_mode": "surrogate", "rkhs_norms": "",
              "candidate_resolution": "12 11 11", "budget": "",
              "sup_resolution": "25", "delta_bar_override": "0.045"},
    "gains": {"mode": "fixed", "kd": "0.9", "kp": "1.0", "c": "0.5",
              "lambda_target": "0.2", "kd_bar": "0.9", "kp_bar": "0.254"},
    "sim": {"x0_mode": "sample", "x0_count": "20", "x0_lo": "-1.25 -1.25",
            "x0_hi": "1.25 1.25", "x0_list": "", "t_final": "30", "dt": "0.01",
            "loop_mode": "solve", "safety_factor": "2.0"},
    "audit": {"tolerance": "1e-3", "state_grid": "50", "error_points": "200"},
}


class ConfigError(ValueError):
    """A configuration value failed validation; the message names the key."""


def subseed(seed: int, label: str) -> int:
    """Deterministic sub-seed for one labeled consumer of the run seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RunConfig:
    """Parsed configuration with typed accessors.

    Values are kept as strings until read so error messages can name
    the offending ``section.key`` path.
    """

    def __init__(self, parser: configparser.ConfigParser):
        self._cp = parser

    # -- construction ----------------------------------------------------

    @classmethod
    def defaults(cls) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_dict(DEFAULTS)
        return cls(cp)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Defaults, then an optional INI file, then key=value overrides.

        Overrides use the form ``section.key=value`` and win over the
        file.
        """
        cfg = cls.defaults()
        if path is not None:
            try:
                with open(path) as fh:
                    cfg._cp.read_file(fh)
            except (OSError, configparser.Error) as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            key, _, value = item.partition("=")
            section, _, name = key.partition(".")
            if not section or not name or not _:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if not cfg._cp.has_section(section):
                raise ConfigError(f"unknown config section {section!r}")
            cfg._cp.set(section, name.strip(), value.strip())
        return cfg

    def dump(self) -> str:
        buf = io.StringIO()
        self._cp.write(buf)
        return buf.getvalue()

    # -- typed accessors ---------------------------------------------------

    def _raw(self, section, key):
        try:
            return self._cp.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as exc:
            raise ConfigError(f"missing config key {section}.{key}") from exc

    def get_float(self, section, key):
        raw = self._raw(section, key)
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: not a number: {raw!r}") from exc

    def get_int(self, section, key):
        raw = self._raw(section, key)
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: not an integer: {raw!r}") from exc

    def get_vector(self, section, key):
        raw = self._raw(section, key)
        try:
            return np.array([float(tok) for tok in raw.split()])
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: not a number list: {raw!r}") from exc

    def get_choice(self, section, key, choices):
        raw = self._raw(section, key).strip()
        if raw not in choices:
            raise ConfigError(f"{section}.{key}: must be one of {sorted(choices)}, got {raw!r}")
        return raw

    def get_optional(self, section, key):
        raw = self._raw(section, key).strip()
        return raw if raw else None

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    def set(self, section, key, value):
        self._cp.set(section, key, str(value))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_system(cfg: RunConfig):
    name = cfg.get_choice("system", "name", {"duffing"})
    if name == "duffing":
        return DuffingOscillator(DuffingParams(
            alpha=cfg.get_float("system", "alpha"),
            beta=cfg.get_float("system", "beta"),
            gamma_damp=cfg.get_float("system", "gamma_damp")))
    raise ConfigError(f"system.name: unsupported plant {name!r}")


def build_domain(cfg: RunConfig) -> DomainSpec:
    try:
        return DomainSpec(
            dx_lo=cfg.get_vector("domain", "x_min"),
            dx_hi=cfg.get_vector("domain", "x_max"),
            dxdot_lo=cfg.get_vector("domain", "xdot_min"),
            dxdot_hi=cfg.get_vector("domain", "xdot_max"),
            u_ex_max=cfg.get_float("domain", "u_ex_max"))
    except ValueError as exc:
        raise ConfigError(f"domain: {exc}") from exc


def _square(vec, name):
    vec = np.atleast_1d(vec)
    n = int(round(np.sqrt(vec.size)))
    if n * n != vec.size:
        raise ConfigError(f"{name}: expected n^2 entries, got {vec.size}")
    return vec.reshape(n, n)


def build_gains(cfg: RunConfig) -> GainSet:
    mode = cfg.get_choice("gains", "mode", {"fixed", "synthesize"})
    kd = _square(cfg.get_vector("gains", "kd"), "gains.kd")
    kp = _square(cfg.get_vector("gains", "kp"), "gains.kp")
    c = cfg.get_float("gains", "c")
    try:
        if mode == "fixed":
            return GainSet(Kd=kd, Kp=kp, c=c)
        return synthesize_gains(c, cfg.get_float("gains", "lambda_target"), kd, kp)
    except ValueError as exc:
        raise ConfigError(f"gains: {exc}") from exc


def build_hypers(cfg: RunConfig, d: int, n: int):
    """Fixed hyperparameters from the [gp] section, one copy per output."""
    sv = cfg.get_float("gp", "signal_variance")
    ls = cfg.get_vector("gp", "lengthscales")
    sn = cfg.get_float("gp", "noise_std")
    if ls.size == 1 and d > 1:
        ls = np.full(d, ls[0])
    if ls.size != d:
        raise ConfigError(f"gp.lengthscales: expected {d} values, got {ls.size}")
    try:
        hyp = gp.Hyperparameters(sv, ls, sn)
    except ValueError as exc:
        raise ConfigError(f"gp: {exc}") from exc
    return [hyp] * n


def build_x0_list(cfg: RunConfig, domain: DomainSpec):
    """Initial states: an explicit list or a seeded sample in a box."""
    mode = cfg.get_choice("sim", "x0_mode", {"sample", "list"})
    dim = domain.dx_lo.size
    if mode == "list":
        raw = cfg.get_optional("sim", "x0_list")
        if raw is None:
            raise ConfigError("sim.x0_list: required when x0_mode = list")
        points = []
        for chunk in raw.split(";"):
            vals = [float(tok) for tok in chunk.split()]
            if len(vals) != dim:
                raise ConfigError(f"sim.x0_list: each point needs {dim} values")
            points.append(np.array(vals))
        return points
    lo = cfg.get_vector("sim", "x0_lo")
    hi = cfg.get_vector("sim", "x0_hi")
    if lo.size != dim or hi.size != dim:
        raise ConfigError(f"sim.x0_lo/x0_hi: expected {dim} values")
    if np.any(lo < domain.dx_lo) or np.any(hi > domain.dx_hi):
        raise ConfigError("sim.x0 sampling box must lie inside Dx")
    count = cfg.get_int("sim", "x0_count")
    if count < 1:
        raise ConfigError("sim.x0_count: must be positive")
    rng = np.random.default_rng(subseed(cfg.seed, "x0-sample"))
    return [rng.uniform(lo, hi) for _ in range(count)]


def validate(cfg: RunConfig):
    """Parse every section once so bad values fail before side effects."""
    build_system(cfg)
    domain = build_domain(cfg)
    n = domain.n
    if cfg.get_int("data", "m") < 1:
        raise ConfigError("data.m: must be positive")
    if cfg.get_float("data", "noise_std") < 0:
        raise ConfigError("data.noise_std: must be nonnegative")
    cfg.get_choice("data", "target_sign", {"standard", "literal"})
    mode = cfg.get_choice("gp", "mode", {"fixed", "optimize"})
    if mode == "fixed":
        build_hypers(cfg, 3 * n, n)
    delta = cfg.get_float("bound", "delta")
    if not 0.0 < delta < 1.0:
        raise ConfigError("bound.delta: must lie in (0, 1)")
    cfg.get_choice("bound", "rkhs_mode", {"surrogate", "user"})
    build_gains(cfg)
    if cfg.get_float("sim", "dt") <= 0 or cfg.get_float("sim", "t_final") <= 0:
        raise ConfigError("sim.dt and sim.t_final must be positive")
    cfg.get_choice("sim", "loop_mode", {"solve", "delayed"})
    build_x0_list(cfg, domain)
    if cfg.get_float("audit", "tolerance") < 0:
        raise ConfigError("audit.tolerance: must be nonnegative")
    return cfg
