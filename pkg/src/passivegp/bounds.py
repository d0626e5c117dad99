"""High-probability model-error bounds from the predictive variance.

For each output dimension the multiplier

    Delta_j = sqrt(2 ||f_j||_k^2 + 300 gamma_j ln^3((m+1)/delta_sc))

(Srinivas et al. 2012, Thm. 6) turns the posterior standard deviation
into a pointwise error bound that holds with probability 1 - delta_sc
per dimension; the joint confidence over n independent outputs is
delta = (1 - delta_sc)^n.  The pointwise bound is the Euclidean norm of
the per-dimension products Delta_j sqrt(var_j), and its supremum over a
grid on the working domain is the constant error budget used by the
certificate.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import gp
from .domain import DomainSpec
from .errors import ContractViolation, DomainViolation
from .textio import g17, g17_seq, read_tokens, write_lines

BOUND_FORMAT = "passivegp-error-bound v1"


# ---------------------------------------------------------------------------
# confidence bookkeeping
# ---------------------------------------------------------------------------

def delta_sc_from_delta(delta: float, n: int) -> float:
    """Per-dimension confidence parameter for a joint confidence delta.

    Inverts delta = (1 - delta_sc)^n, so delta_sc = 1 - delta^(1/n).
    """
    if not 0.0 < delta < 1.0:
        raise ContractViolation(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ContractViolation("n must be a positive integer")
    return 1.0 - delta ** (1.0 / n)


# ---------------------------------------------------------------------------
# information gain
# ---------------------------------------------------------------------------

def information_gain(candidates, hyper: gp.Hyperparameters, budget: int):
    """Greedy lower bound on the maximum information gain.

    Selects ``budget`` points from the candidate columns by repeatedly
    taking the point of largest posterior variance and accumulates
    1/2 log det(I + sigma^-2 K) for the selected set.  Greedy selection
    of a monotone submodular objective is within a factor (1 - 1/e) of
    the intractable exact maximum.

    Returns (gamma, chosen_indices).  Ties break toward the lowest
    candidate index; repeated noisy sampling of a point is allowed.
    """
    Q = np.asarray(candidates, dtype=float)
    if Q.ndim != 2 or Q.shape[1] == 0:
        raise ContractViolation("candidate set must be a nonempty (d, N) matrix")
    N = Q.shape[1]
    if not 1 <= budget <= N:
        raise ContractViolation(f"budget must lie in [1, {N}], got {budget}")
    sn2 = hyper.noise_std ** 2
    if sn2 <= 0.0:
        raise ContractViolation("information gain needs a positive noise level")

    v = np.full(N, hyper.signal_variance)    # posterior variances
    C = np.empty((budget, N))                # whitened cross-covariance rows
    chosen = np.empty(budget, dtype=int)
    gamma = 0.0
    for t in range(budget):
        j = int(np.argmax(v))
        chosen[t] = j
        gamma += 0.5 * np.log1p(v[j] / sn2)
        k_j = gp.kernel_cross(Q, Q[:, j], hyper)[:, 0]
        if t:
            k_j -= C[:t, j] @ C[:t]
        C[t] = k_j / np.sqrt(v[j] + sn2)
        v = np.maximum(v - C[t] * C[t], 0.0)
    return float(gamma), chosen


# ---------------------------------------------------------------------------
# RKHS norm surrogate
# ---------------------------------------------------------------------------

def rkhs_norm_estimate(model: gp.GPModel, dim: int, user_bound=None) -> float:
    """Kernel-space norm of the posterior mean of one output dimension.

    The posterior mean is sum_j alpha_j k(., x_j) with norm
    sqrt(alpha^T K alpha).  This is a data-driven surrogate for the
    unknowable norm of the true function; when a trusted user bound is
    available the larger of the two is returned.
    """
    if not 0 <= dim < model.output_dim:
        raise ContractViolation(f"output index {dim} out of range")
    K = gp.gram_matrix(model.inputs, model.hypers[dim])
    a = model.alphas[:, dim]
    value = float(np.sqrt(max(a @ K @ a, 0.0)))
    if user_bound is not None:
        value = max(value, float(user_bound))
    return value


# ---------------------------------------------------------------------------
# error multipliers and pointwise bound
# ---------------------------------------------------------------------------

def delta_vector(rkhs_norms, gammas, m: int, delta: float) -> np.ndarray:
    """Per-dimension multipliers Delta_j at joint confidence delta.

    Applies the scalar result per dimension at confidence delta_sc so
    the intersection over dimensions holds with probability delta.
    """
    norms = np.atleast_1d(np.asarray(rkhs_norms, dtype=float))
    gam = np.atleast_1d(np.asarray(gammas, dtype=float))
    if norms.shape != gam.shape:
        raise ContractViolation("rkhs_norms and gammas must have matching shapes")
    if np.any(norms < 0.0) or np.any(gam < 0.0):
        raise ContractViolation("rkhs_norms and gammas must be nonnegative")
    if m < 1:
        raise ContractViolation("m must be positive")
    dsc = delta_sc_from_delta(delta, norms.size)
    log_term = np.log((m + 1) / dsc)
    return np.sqrt(2.0 * norms ** 2 + 300.0 * gam * log_term ** 3)


def pointwise_bound(model: gp.GPModel, delta_vec, query, domain: DomainSpec) -> float:
    """Error bound || (Delta_j sqrt(var_j))_j || at one stacked query.

    The bound is only claimed on the working domain, so queries outside
    Dxdot x Dx are rejected.
    """
    q = np.asarray(query, dtype=float).ravel()
    if not domain.contains_query(q, tol=1e-12):
        raise DomainViolation("query outside the working domain; the bound does not apply")
    dv = np.atleast_1d(np.asarray(delta_vec, dtype=float))
    var = gp.predict_var(model, q)
    return float(np.linalg.norm(dv * np.sqrt(var)))


# ---------------------------------------------------------------------------
# domain supremum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelErrorBound:
    """Bound record: multipliers, information gains and the grid supremum."""

    delta_vec: np.ndarray        # per-dimension multipliers Delta_j
    gammas: np.ndarray           # per-dimension information gains (nats)
    rkhs_norms: np.ndarray       # norms used to build delta_vec
    delta_bar: float             # supremum of the pointwise bound on the grid
    delta: float                 # joint confidence
    delta_sc: float              # per-dimension confidence parameter
    m: int                       # training set size behind the bound
    grid_shape: tuple            # per-axis counts of the audited grid
    argmax_point: np.ndarray     # grid point attaining the supremum


def delta_bar(model: gp.GPModel, delta_vec, domain: DomainSpec, resolution=25,
              *, delta=float("nan"), delta_sc=float("nan"), gammas=None,
              rkhs_norms=None, m=None) -> ModelErrorBound:
    """Supremum of the pointwise bound over a regular grid on the domain.

    ``resolution`` gives per-axis counts (minimum 2).  The argmax point
    is recorded so the supremum can be refined locally.  Keyword fields
    only annotate the returned record.
    """
    dv = np.atleast_1d(np.asarray(delta_vec, dtype=float))
    if dv.size != model.output_dim:
        raise ContractViolation("delta_vec must have one entry per output dimension")
    grid, counts = domain.query_grid(resolution)
    if min(counts) < 2:
        raise ContractViolation("supremum grid needs at least 2 points per axis")

    best_val, best_point = -1.0, None
    for start in range(0, grid.shape[1], 4096):
        block = grid[:, start:start + 4096]
        var = gp.predict_var(model, block)                 # (N, n)
        vals = np.sqrt(var @ (dv ** 2))
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val = float(vals[j])
            best_point = block[:, j].copy()

    return ModelErrorBound(
        delta_vec=dv.copy(),
        gammas=np.full(dv.shape, np.nan) if gammas is None else np.asarray(gammas, float).copy(),
        rkhs_norms=(np.full(dv.shape, np.nan) if rkhs_norms is None
                    else np.asarray(rkhs_norms, float).copy()),
        delta_bar=best_val,
        delta=float(delta),
        delta_sc=float(delta_sc),
        m=model.size if m is None else int(m),
        grid_shape=counts,
        argmax_point=best_point,
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class BoundConfig:
    """Inputs of the bound pipeline.

    ``rkhs_norms`` may be None (use the data-driven surrogate) or a
    vector of user-supplied norm bounds which are combined with the
    surrogate by taking the maximum.  ``budget`` defaults to m + 1.
    """

    delta: float = 0.95
    candidate_grid: np.ndarray = None      # (d, N) columns inside the domain
    rkhs_norms: np.ndarray = None
    budget: int = None
    sup_resolution: int = 25

    def validate(self, domain: DomainSpec):
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation("delta must lie in (0, 1)")
        if self.candidate_grid is None:
            raise ContractViolation("a candidate grid is required")
        Q = np.asarray(self.candidate_grid, dtype=float)
        if Q.ndim != 2 or Q.shape[1] == 0:
            raise ContractViolation("candidate grid must be a nonempty (d, N) matrix")
        for j in range(Q.shape[1]):
            if not domain.contains_query(Q[:, j], tol=1e-9):
                raise ContractViolation("candidate grid points must lie inside the domain")


def compute_error_bound(model: gp.GPModel, domain: DomainSpec,
                        config: BoundConfig) -> ModelErrorBound:
    """Full bound pipeline: gains, norms, multipliers and grid supremum."""
    config.validate(domain)
    n, m = model.output_dim, model.size
    budget = m + 1 if config.budget is None else int(config.budget)
    gammas = np.empty(n)
    norms = np.empty(n)
    user = config.rkhs_norms
    for i in range(n):
        gammas[i], _ = information_gain(config.candidate_grid, model.hypers[i], budget)
        norms[i] = rkhs_norm_estimate(model, i, None if user is None else user[i])
    if user is None:
        warnings.warn(
            "RKHS norms estimated from the posterior mean; the probability claim "
            "of the bound is conditional on these being true upper bounds",
            RuntimeWarning)
    dv = delta_vector(norms, gammas, m, config.delta)
    dsc = delta_sc_from_delta(config.delta, n)
    return delta_bar(model, dv, domain, config.sup_resolution,
                     delta=config.delta, delta_sc=dsc, gammas=gammas,
                     rkhs_norms=norms, m=m)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def save_bound_report(bound: ModelErrorBound, path):
    n = bound.delta_vec.size
    lines = [
        BOUND_FORMAT,
        f"n {n}",
        f"q {bound.argmax_point.size}",
        "delta " + g17(bound.delta),
        "delta_sc " + g17(bound.delta_sc),
        "m " + str(bound.m),
        "delta_vec " + g17_seq(bound.delta_vec),
        "gammas " + g17_seq(bound.gammas),
        "rkhs_norms " + g17_seq(bound.rkhs_norms),
        "delta_bar " + g17(bound.delta_bar),
        "argmax_point " + g17_seq(bound.argmax_point),
        "grid_shape " + " ".join(str(c) for c in bound.grid_shape),
    ]
    write_lines(path, lines)


def load_bound_report(path) -> ModelErrorBound:
    tokens = read_tokens(path)
    if tokens[0] + " " + tokens[1] != BOUND_FORMAT:
        raise ContractViolation("unrecognized bound report format")
    pos = [2]

    def take(key, count):
        if tokens[pos[0]] != key:
            raise ContractViolation(f"expected {key!r} in bound report")
        vals = tokens[pos[0] + 1:pos[0] + 1 + count]
        pos[0] += 1 + count
        return vals

    n = int(take("n", 1)[0])
    q = int(take("q", 1)[0])
    delta = float(take("delta", 1)[0])
    dsc = float(take("delta_sc", 1)[0])
    m = int(take("m", 1)[0])
    dv = np.array([float(t) for t in take("delta_vec", n)])
    gammas = np.array([float(t) for t in take("gammas", n)])
    norms = np.array([float(t) for t in take("rkhs_norms", n)])
    dbar = float(take("delta_bar", 1)[0])
    argmax = np.array([float(t) for t in take("argmax_point", q)])
    shape = tuple(int(t) for t in take("grid_shape", q))
    return ModelErrorBound(delta_vec=dv, gammas=gammas, rkhs_norms=norms,
                           delta_bar=dbar, delta=delta, delta_sc=dsc, m=m,
                           grid_shape=shape, argmax_point=argmax)
