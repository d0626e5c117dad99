"""Exact multi-output Gaussian process regression.

Each output dimension is a scalar GP with its own anisotropic squared
exponential kernel and Gaussian observation noise; the outputs share the
training inputs and are predicted independently, giving a diagonal
predictive covariance.  Inference follows the standard Cholesky route
(Rasmussen & Williams 2006, ch. 2 and 5): with ``A = K + sigma^2 I``,

    mean(x*) = k(x*, X)^T A^-1 y
    var(x*)  = k(x*, x*) - k(x*, X)^T A^-1 k(x*, X)

and the log marginal likelihood and its gradient in log-parameter space
drive hyperparameter selection.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ContractViolation, IllConditionedData, InternalConsistencyError
from .textio import g17, g17_seq, read_tokens, write_lines

JITTER_START = 1e-10
JITTER_MAX = 1e-4
NOISE_FLOOR = 1e-6

MODEL_FORMAT = "passivegp-gp-model v1"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparameters:
    """Kernel and noise parameters of one scalar output GP.

    Parameters
    ----------
    signal_variance : float
        Prior variance sigma_f^2, strictly positive.
    lengthscales : array_like, shape (d,)
        One strictly positive lengthscale per input dimension.
    noise_std : float
        Observation noise standard deviation, nonnegative.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        if ls.ndim != 1 or ls.size == 0:
            raise ContractViolation("lengthscales must be a nonempty vector")
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0.0):
            raise ContractViolation("every lengthscale must be finite and positive")
        sv = float(self.signal_variance)
        if not np.isfinite(sv) or sv <= 0.0:
            raise ContractViolation("signal_variance must be finite and positive")
        sn = float(self.noise_std)
        if not np.isfinite(sn) or sn < 0.0:
            raise ContractViolation("noise_std must be finite and nonnegative")
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", sv)
        object.__setattr__(self, "noise_std", sn)

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size

    def to_log_vector(self) -> np.ndarray:
        """Pack as (log sigma_f^2, log l_1..l_d, log sigma_n).

        The noise entry is floored at NOISE_FLOOR so a zero-noise setting
        still has a finite log representation.
        """
        sn = max(self.noise_std, NOISE_FLOOR)
        return np.log(np.concatenate(
            ([self.signal_variance], self.lengthscales, [sn])))

    @classmethod
    def from_log_vector(cls, theta) -> "Hyperparameters":
        theta = np.asarray(theta, dtype=float)
        return cls(signal_variance=float(np.exp(theta[0])),
                   lengthscales=np.exp(theta[1:-1]),
                   noise_std=float(np.exp(theta[-1])))


@dataclass(frozen=True)
class TrainingSet:
    """Regression data: input columns, target rows and per-output noise.

    Parameters
    ----------
    inputs : ndarray, shape (d, m)
        One training point per column.
    targets : ndarray, shape (m, n)
        Noisy observations, one row per training point.
    noise_std : array_like, shape (n,)
        Standard deviation of the noise that corrupted each target column.
    lattice_shape : tuple, optional
        Per-axis counts of the generating lattice, when the set came from
        a regular grid.
    """

    inputs: np.ndarray
    targets: np.ndarray
    noise_std: np.ndarray
    lattice_shape: tuple = None

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        Y = np.asarray(self.targets, dtype=float)
        if X.ndim != 2 or Y.ndim != 2:
            raise ContractViolation("inputs and targets must be 2-D arrays")
        if X.shape[1] != Y.shape[0]:
            raise ContractViolation(
                f"inputs have {X.shape[1]} columns but targets have {Y.shape[0]} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ContractViolation("training data must be finite")
        sn = np.atleast_1d(np.asarray(self.noise_std, dtype=float)).copy()
        if sn.size != Y.shape[1]:
            raise ContractViolation("need one noise level per output dimension")
        if np.any(sn < 0.0) or not np.all(np.isfinite(sn)):
            raise ContractViolation("noise levels must be finite and nonnegative")
        for name, arr in (("inputs", X.copy()), ("targets", Y.copy()), ("noise_std", sn)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True)
class GPModel:
    """Fitted multi-output GP; immutable after construction.

    Per output dimension ``i`` the model stores the hyperparameters, the
    lower Cholesky factor of ``K_i + sigma_i^2 I`` (with any jitter that
    was needed) and the weight vector ``alpha_i`` solving
    ``(K_i + sigma_i^2 I) alpha_i = Y[:, i]``.
    """

    inputs: np.ndarray               # (d, m)
    hypers: tuple                     # n Hyperparameters
    chol_factors: tuple               # n lower-triangular (m, m) arrays
    alphas: np.ndarray                # (m, n)
    jitters: tuple                    # n floats actually added to the diagonal

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float).copy()
        X.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        A = np.asarray(self.alphas, dtype=float).copy()
        A.setflags(write=False)
        object.__setattr__(self, "alphas", A)
        for L in self.chol_factors:
            L.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return len(self.hypers)


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------

def kernel_eval(a, b, hyper: Hyperparameters) -> float:
    """Anisotropic squared exponential kernel between two points.

    k(a, b) = sigma_f^2 exp(-1/2 sum_k (a_k - b_k)^2 / l_k^2)
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    d = hyper.input_dim
    if a.size != d or b.size != d:
        raise ContractViolation(
            f"kernel arguments must have dimension {d}, got {a.size} and {b.size}")
    r = (a - b) / hyper.lengthscales
    return float(hyper.signal_variance * np.exp(-0.5 * np.dot(r, r)))


def gram_matrix(X, hyper: Hyperparameters) -> np.ndarray:
    """Kernel matrix of the training inputs, entry (j, l) = k(x_l, x_j).

    Parameters
    ----------
    X : ndarray, shape (d, m)
        Training points as columns.
    """
    X = _check_inputs(X, hyper)
    Z = (X / hyper.lengthscales[:, None]).T          # (m, d), scaled points
    sq = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
    return hyper.signal_variance * np.exp(-0.5 * sq)


def kernel_cross(X, Q, hyper: Hyperparameters) -> np.ndarray:
    """Kernel block between training columns X (d, m) and queries Q (d, N).

    Returns the (m, N) matrix k(X, Q).
    """
    X = _check_inputs(X, hyper)
    Q = _check_inputs(Q, hyper)
    ls = hyper.lengthscales[:, None]
    ZX = (X / ls).T
    ZQ = (Q / ls).T
    sq = (np.sum(ZX ** 2, axis=1)[:, None] + np.sum(ZQ ** 2, axis=1)[None, :]
          - 2.0 * ZX @ ZQ.T)
    np.maximum(sq, 0.0, out=sq)
    return hyper.signal_variance * np.exp(-0.5 * sq)


def _check_inputs(X, hyper):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != hyper.input_dim:
        raise ContractViolation(
            f"points have dimension {X.shape[0]}, lengthscales expect {hyper.input_dim}")
    return X


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _chol_with_jitter(A):
    """Lower Cholesky factor of A, escalating a diagonal jitter on failure.

    Starts at JITTER_START and multiplies by 10 up to JITTER_MAX before
    giving up.  Returns (L, jitter_used).
    """
    try:
        return linalg.cholesky(A, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(A.shape[0])
    while jitter <= JITTER_MAX:
        try:
            return linalg.cholesky(A + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise IllConditionedData(
        f"Cholesky factorization failed even with jitter {JITTER_MAX:g}")


def fit(data: TrainingSet, hypers) -> GPModel:
    """Fit one scalar GP per output dimension on shared inputs.

    ``hypers`` is a sequence of one Hyperparameters per output; each
    carries the noise level used on the Gram diagonal.  Zero noise is
    handled by the jitter escalation of the factorization.
    """
    hypers = tuple(hypers)
    if len(hypers) != data.output_dim:
        raise ContractViolation(
            f"need {data.output_dim} hyperparameter sets, got {len(hypers)}")
    m = data.size
    chols, jitters = [], []
    alphas = np.empty((m, data.output_dim))
    for i, hyp in enumerate(hypers):
        if hyp.input_dim != data.input_dim:
            raise ContractViolation("hyperparameter dimension does not match inputs")
        if m == 0:                           # prior-only model
            chols.append(np.zeros((0, 0)))
            jitters.append(0.0)
            continue
        A = gram_matrix(data.inputs, hyp)
        A[np.diag_indices_from(A)] += hyp.noise_std ** 2
        L, jit = _chol_with_jitter(A)
        chols.append(L)
        jitters.append(jit)
        alphas[:, i] = linalg.cho_solve((L, True), data.targets[:, i])
    return GPModel(inputs=data.inputs, hypers=hypers, chol_factors=tuple(chols),
                   alphas=alphas, jitters=tuple(jitters))


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _as_queries(model, xstar):
    """Normalize a query to (d, N) columns plus a flag for single points."""
    q = np.asarray(xstar, dtype=float)
    single = q.ndim == 1
    if single:
        q = q[:, None]
    if q.shape[0] != model.input_dim:
        raise ContractViolation(
            f"query dimension {q.shape[0]} does not match model dimension {model.input_dim}")
    if not np.all(np.isfinite(q)):
        raise ContractViolation("query must be finite")
    return q, single


def predict_mean(model: GPModel, xstar) -> np.ndarray:
    """Posterior mean at a query.

    A single point (d,) gives an (n,) vector; a batch (d, N) gives (N, n).
    """
    q, single = _as_queries(model, xstar)
    out = np.empty((q.shape[1], model.output_dim))
    if model.size == 0:
        out[:] = 0.0
        return out[0] if single else out
    for i, hyp in enumerate(model.hypers):
        out[:, i] = kernel_cross(model.inputs, q, hyp).T @ model.alphas[:, i]
    return out[0] if single else out


def predict_var(model: GPModel, xstar) -> np.ndarray:
    """Posterior variance at a query, clamped at tiny negative rounding.

    Negative values within a rounding window scaled by the signal
    variance are clamped to zero; anything beyond that raises
    InternalConsistencyError.
    """
    q, single = _as_queries(model, xstar)
    out = np.empty((q.shape[1], model.output_dim))
    if model.size == 0:
        for i, hyp in enumerate(model.hypers):
            out[:, i] = hyp.signal_variance
        return out[0] if single else out
    for i, hyp in enumerate(model.hypers):
        kq = kernel_cross(model.inputs, q, hyp)
        v = linalg.solve_triangular(model.chol_factors[i], kq, lower=True)
        var = hyp.signal_variance - np.sum(v * v, axis=0)
        floor = -1e-10 * max(1.0, hyp.signal_variance)
        if np.any(var < floor):
            raise InternalConsistencyError(
                f"negative predicted variance {var.min():g} in output {i}")
        out[:, i] = np.maximum(var, 0.0)
    return out[0] if single else out


def predict_mean_jacobian(model: GPModel, xstar):
    """Posterior mean and its Jacobian with respect to the query point.

    Returns (mean (n,), jac (n, d)).  The SE kernel gives
    d mean / d x* = sum_j alpha_j k(x*, x_j) (x_j - x*) / l^2.
    """
    q, single = _as_queries(model, xstar)
    if not single:
        raise ContractViolation("jacobian is defined for a single query point")
    mean = np.empty(model.output_dim)
    jac = np.empty((model.output_dim, model.input_dim))
    if model.size == 0:
        return np.zeros(model.output_dim), np.zeros_like(jac)
    for i, hyp in enumerate(model.hypers):
        k = kernel_cross(model.inputs, q, hyp)[:, 0]
        w = k * model.alphas[:, i]
        mean[i] = w.sum()
        diff = model.inputs - q                      # (d, m)
        jac[i] = (diff / hyp.lengthscales[:, None] ** 2) @ w
    return mean, jac


# ---------------------------------------------------------------------------
# marginal likelihood
# ---------------------------------------------------------------------------

def log_marginal_likelihood(data: TrainingSet, hyper: Hyperparameters, i: int):
    """Log marginal likelihood of output column ``i`` and its gradient.

    The gradient is taken with respect to the log-parameter vector
    (log sigma_f^2, log l_1..l_d, log sigma_n), using
    d logp / d theta = 1/2 tr((alpha alpha^T - A^-1) dA/dtheta).
    """
    if not 0 <= i < data.output_dim:
        raise ContractViolation(f"output index {i} out of range")
    X, y = data.inputs, data.targets[:, i]
    m = data.size
    K = gram_matrix(X, hyper)
    A = K + (hyper.noise_std ** 2) * np.eye(m)
    try:
        L = linalg.cholesky(A, lower=True)
    except linalg.LinAlgError as exc:
        raise IllConditionedData("K + I sigma^2 is not factorizable") from exc
    alpha = linalg.cho_solve((L, True), y)
    value = (-0.5 * float(y @ alpha)
             - float(np.sum(np.log(np.diag(L))))
             - 0.5 * m * np.log(2.0 * np.pi))

    # W = alpha alpha^T - A^-1; only elementwise products with dA are needed
    Ainv = linalg.cho_solve((L, True), np.eye(m))
    W = np.outer(alpha, alpha) - Ainv

    grad = np.empty(hyper.input_dim + 2)
    grad[0] = 0.5 * float(np.sum(W * K))             # d/d log sigma_f^2
    Z = X / hyper.lengthscales[:, None]
    for k in range(hyper.input_dim):
        D2 = (Z[k][:, None] - Z[k][None, :]) ** 2    # squared scaled distances
        grad[1 + k] = 0.5 * float(np.sum(W * (K * D2)))
    # d A / d log sigma_n = 2 sigma_n^2 I; zero-noise limit has zero gradient
    grad[-1] = float(hyper.noise_std ** 2 * np.trace(W))
    return value, grad


@dataclass
class OptimizerConfig:
    """Settings for marginal-likelihood ascent."""

    restarts: int = 5
    max_iter: int = 500
    grad_tol: float = 1e-6
    noise_floor: float = NOISE_FLOOR
    seed: int = 0
    log_bounds: float = 20.0     # |log parameter| cap, keeps exp() finite


def _lml_safe(data, theta, i):
    """LML at a log-parameter vector, -inf when not factorizable."""
    try:
        value, grad = log_marginal_likelihood(data, Hyperparameters.from_log_vector(theta), i)
    except IllConditionedData:
        return -np.inf, None
    if not np.isfinite(value):
        return -np.inf, None
    return value, grad


def _ascend(data, theta0, i, cfg):
    """Gradient ascent with backtracking line search in log space."""
    lo = np.log(cfg.noise_floor)
    theta = theta0.copy()
    theta[-1] = max(theta[-1], lo)
    f, g = _lml_safe(data, theta, i)
    if g is None:
        return theta, f
    step = 1.0
    for _ in range(cfg.max_iter):
        gnorm = np.max(np.abs(g))
        if gnorm <= cfg.grad_tol:
            break
        # never move more than one log unit per trial; large gradients
        # otherwise hop between likelihood basins
        t = min(step, 1.0 / gnorm)
        improved = False
        for _ in range(30):
            cand = np.clip(theta + t * g, -cfg.log_bounds, cfg.log_bounds)
            cand[-1] = max(cand[-1], lo)
            fc, gc = _lml_safe(data, cand, i)
            if fc > f + 1e-4 * t * float(g @ g) and gc is not None:
                theta, f, g = cand, fc, gc
                step = t * 2.0
                improved = True
                break
            t *= 0.5
        if not improved:
            break
    return theta, f


def optimize_hyperparameters(data: TrainingSet, config: OptimizerConfig = None):
    """Maximize the marginal likelihood independently per output dimension.

    Runs seeded multi-start gradient ascent in log-parameter space and
    returns the best stationary point found for each output.  The result
    is never worse than every initial guess; if no restart improves on
    its start, the best initial guess is returned with a warning.
    """
    if data.size < 2:
        raise ContractViolation("hyperparameter optimization needs at least 2 points")
    cfg = config or OptimizerConfig()
    rng = np.random.default_rng(cfg.seed)
    results = []
    for i in range(data.output_dim):
        guesses = _initial_guesses(data, i, cfg, rng)
        start_best = max(_lml_safe(data, th, i)[0] for th in guesses)
        best_theta, best_f = None, -np.inf
        for theta0 in guesses:
            theta, f = _ascend(data, theta0, i, cfg)
            if f > best_f:
                best_theta, best_f = theta, f
        if best_theta is None or not np.isfinite(best_f):
            raise IllConditionedData(f"no factorizable hyperparameters for output {i}")
        if best_f < start_best:
            warnings.warn(f"output {i}: ascent failed to improve on initial guesses",
                          RuntimeWarning)
        results.append(Hyperparameters.from_log_vector(best_theta))
    return results


def _initial_guesses(data, i, cfg, rng):
    """Heuristic start plus seeded log-space perturbations of it."""
    y = data.targets[:, i]
    sv = max(float(np.var(y)), 1e-6)
    spread = np.std(data.inputs, axis=1)
    ls = np.where(spread > 1e-3, spread, 1.0)
    sn = max(0.1 * np.sqrt(sv), cfg.noise_floor)
    base = Hyperparameters(sv, ls, sn).to_log_vector()
    guesses = [base]
    for _ in range(max(cfg.restarts - 1, 0)):
        guesses.append(base + rng.uniform(-1.5, 1.5, size=base.size))
    return guesses


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(model: GPModel, path):
    """Write the model as a versioned plain-text document.

    Stores dimensions, per-output hyperparameters, jitters, weight
    vectors and the training inputs with 17 significant digits, enough
    to reproduce predictions exactly on reload.
    """
    d, n, m = model.input_dim, model.output_dim, model.size
    lines = [MODEL_FORMAT, f"d {d}", f"n {n}", f"m {m}"]
    for i, hyp in enumerate(model.hypers):
        lines.append(f"output {i}")
        lines.append("signal_variance " + g17(hyp.signal_variance))
        lines.append("lengthscales " + g17_seq(hyp.lengthscales))
        lines.append("noise_std " + g17(hyp.noise_std))
        lines.append("jitter " + g17(model.jitters[i]))
        lines.append("alpha " + g17_seq(model.alphas[:, i]))
    lines.append("inputs")
    for j in range(m):
        lines.append(g17_seq(model.inputs[:, j]))
    write_lines(path, lines)


def load_model(path) -> GPModel:
    """Reload a model written by save_model.

    The Cholesky factors are rebuilt from the stored inputs and the
    stored jitter, which reproduces the original factorization bit for
    bit on the same platform.
    """
    tokens = read_tokens(path)
    header = tokens[0] + " " + tokens[1]
    if header != MODEL_FORMAT:
        raise ContractViolation(f"unrecognized model format {header!r}")
    pos = 2

    def expect(key):
        nonlocal pos
        if tokens[pos] != key:
            raise ContractViolation(f"expected {key!r} at token {pos}, got {tokens[pos]!r}")
        pos += 1

    def take(count):
        nonlocal pos
        vals = np.array([float(t) for t in tokens[pos:pos + count]])
        pos += count
        return vals

    expect("d")
    d = int(take(1)[0])
    expect("n")
    n = int(take(1)[0])
    expect("m")
    m = int(take(1)[0])

    hypers, jitters = [], []
    alphas = np.empty((m, n))
    for i in range(n):
        expect("output")
        take(1)
        expect("signal_variance")
        sv = float(take(1)[0])
        expect("lengthscales")
        ls = take(d)
        expect("noise_std")
        sn = float(take(1)[0])
        expect("jitter")
        jitters.append(float(take(1)[0]))
        expect("alpha")
        alphas[:, i] = take(m)
        hypers.append(Hyperparameters(sv, ls, sn))
    expect("inputs")
    X = take(d * m).reshape(m, d).T

    chols = []
    for i, hyp in enumerate(hypers):
        A = gram_matrix(X, hyp)
        A[np.diag_indices_from(A)] += hyp.noise_std ** 2 + jitters[i]
        try:
            L = linalg.cholesky(A, lower=True)
        except linalg.LinAlgError as exc:
            raise IllConditionedData("stored model no longer factorizes") from exc
        chols.append(L)
    return GPModel(inputs=X, hypers=tuple(hypers), chol_factors=tuple(chols),
                   alphas=alphas, jitters=tuple(jitters))
