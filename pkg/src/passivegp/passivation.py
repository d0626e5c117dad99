"""Gain conditions, storage function and the semi-passivity certificate.

The feedback loop u_c = K_d x2 + K_p x1 together with the passive output
y_ex = c x1 + x2 dissipates through the block matrix

    L(K_d, K_p, c) = [[K_d - c I,  c/2 K_d],
                      [c/2 K_d,    c K_p ]]

whose smallest eigenvalue, combined with the model-error budget, fixes
the ball outside of which the closed loop provably behaves passive.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .domain import DomainSpec
from .errors import ContractViolation, SynthesisFailure
from .textio import g17, g17_seq, read_tokens, write_lines

CERT_FORMAT = "passivegp-certificate v1"


# ---------------------------------------------------------------------------
# gains
# ---------------------------------------------------------------------------

def _as_spd(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ContractViolation(f"{name} must be square")
    if not np.all(np.isfinite(M)):
        raise ContractViolation(f"{name} must be finite")
    if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, np.max(np.abs(M))):
        raise ContractViolation(f"{name} must be symmetric")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M)[0] <= 0.0:
        raise ContractViolation(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class GainSet:
    """Feedback gains (K_d, K_p) and output constant c.

    Both gain matrices must be symmetric positive definite and the
    storage function requires lambda_min(K_p) > c^2.
    """

    Kd: np.ndarray
    Kp: np.ndarray
    c: float

    def __post_init__(self):
        Kd = _as_spd(self.Kd, "Kd")
        Kp = _as_spd(self.Kp, "Kp")
        if Kd.shape != Kp.shape:
            raise ContractViolation("Kd and Kp must have the same shape")
        c = float(self.c)
        if not np.isfinite(c) or c <= 0.0:
            raise ContractViolation("c must be finite and positive")
        if np.linalg.eigvalsh(Kp)[0] <= c * c:
            raise ContractViolation("storage positivity needs lambda_min(Kp) > c^2")
        Kd.setflags(write=False)
        Kp.setflags(write=False)
        object.__setattr__(self, "Kd", Kd)
        object.__setattr__(self, "Kp", Kp)
        object.__setattr__(self, "c", c)

    @property
    def n(self) -> int:
        return self.Kd.shape[0]


def lambda_matrix(gains: GainSet) -> np.ndarray:
    """Assemble the symmetric 2n x 2n dissipation matrix."""
    n = gains.n
    c = gains.c
    out = np.empty((2 * n, 2 * n))
    out[:n, :n] = gains.Kd - c * np.eye(n)
    out[:n, n:] = 0.5 * c * gains.Kd
    out[n:, :n] = 0.5 * c * gains.Kd
    out[n:, n:] = c * gains.Kp
    return out


def lambda_min_eig(gains: GainSet) -> float:
    """Smallest eigenvalue of the dissipation matrix."""
    return float(np.linalg.eigvalsh(lambda_matrix(gains))[0])


def is_lambda_pd(gains: GainSet):
    """Schur-complement positive-definiteness test.

    L > 0 iff c Kp > 0 and Kd - c I - (c/4) Kd Kp^-1 Kd > 0.  Returns
    (verdict, lambda_min of the Schur complement) so callers can see the
    margin.
    """
    c, Kd, Kp = gains.c, gains.Kd, gains.Kp
    kp_min = float(np.linalg.eigvalsh(Kp)[0])
    if kp_min <= 0.0 or not np.isfinite(kp_min):
        raise ContractViolation("Kp must be invertible and positive definite")
    schur = Kd - c * np.eye(gains.n) - 0.25 * c * (Kd @ np.linalg.solve(Kp, Kd))
    schur = 0.5 * (schur + schur.T)
    witness = float(np.linalg.eigvalsh(schur)[0])
    return witness > 0.0, witness


def synthesize_gains(c: float, lambda_target: float, seed_Kd, seed_Kp) -> GainSet:
    """Scale seed gains until lambda_min(L) reaches the target.

    Splitting L into c and gain-proportional parts gives
    lambda_min(L(g Kd, g Kp, c)) >= -c + g lambda_min(M) with
    M = [[Kd, c/2 Kd], [c/2 Kd, c Kp]], so g = (c + target)/lambda_min(M)
    suffices once M is positive definite.  If the seed Schur complement
    Kd - (c/4) Kd Kp^-1 Kd fails, seed_Kp is inflated by powers of two,
    which always succeeds for large enough Kp.  A final scaling step
    enforces lambda_min(Kp) > c^2.
    """
    if not np.isfinite(c) or c <= 0.0:
        raise ContractViolation("c must be positive")
    if lambda_target < 0.0:
        raise ContractViolation("lambda_target must be nonnegative")
    Kd = _as_spd(seed_Kd, "seed_Kd")
    Kp = _as_spd(seed_Kp, "seed_Kp")
    if Kd.shape != Kp.shape:
        raise ContractViolation("seed matrices must have the same shape")
    n = Kd.shape[0]

    # repair the seed so M is positive definite
    ok = False
    for _ in range(21):
        schur = Kd - 0.25 * c * (Kd @ np.linalg.solve(Kp, Kd))
        if np.linalg.eigvalsh(0.5 * (schur + schur.T))[0] > 0.0:
            ok = True
            break
        Kp = 2.0 * Kp
    if not ok:
        raise SynthesisFailure("seed Schur complement not positive definite after inflation")

    M = np.empty((2 * n, 2 * n))
    M[:n, :n] = Kd
    M[:n, n:] = 0.5 * c * Kd
    M[n:, :n] = 0.5 * c * Kd
    M[n:, n:] = c * Kp
    m_min = float(np.linalg.eigvalsh(M)[0])
    if m_min <= 0.0:
        raise SynthesisFailure("seed dissipation matrix is not positive definite")

    g = (c + lambda_target) / m_min
    # keep lambda_min(g Kp) > c^2; scaling up never loses the target
    kp_min = float(np.linalg.eigvalsh(Kp)[0])
    g = max(g, (c * c / kp_min) * (1.0 + 1e-9))
    g *= 1.0 + 1e-9      # headroom so the target survives rounding
    return GainSet(Kd=g * Kd, Kp=g * Kp, c=c)


def check_gain_caps(gains: GainSet, kd_bar: float, kp_bar: float) -> bool:
    """Whether the gains respect the working-domain caps and keep L > 0.

    The caps themselves must satisfy kd_bar > c and
    kp_bar > max(c kd_bar^2 / (4 (kd_bar - c)), c^2); otherwise no
    admissible gain set exists and the call is rejected.
    """
    c = gains.c
    if kd_bar <= c:
        raise ContractViolation(f"cap precondition failed: kd_bar = {kd_bar} <= c = {c}")
    threshold = max(c * kd_bar ** 2 / (4.0 * (kd_bar - c)), c * c)
    if kp_bar <= threshold:
        raise ContractViolation(
            f"cap precondition failed: kp_bar = {kp_bar} <= max(c kd_bar^2/(4(kd_bar - c)), c^2) = {threshold}")
    kd_max = float(np.linalg.eigvalsh(gains.Kd)[-1])
    kp_max = float(np.linalg.eigvalsh(gains.Kp)[-1])
    pd, _ = is_lambda_pd(gains)
    return kd_max <= kd_bar and kp_max <= kp_bar and pd


# ---------------------------------------------------------------------------
# working-domain obligations
# ---------------------------------------------------------------------------

class BoxBound(NamedTuple):
    value: float
    contained: bool


def required_xdot_bound(domain: DomainSpec, kd_bar: float, kp_bar: float) -> BoxBound:
    """Acceleration magnitude the domain must absorb for capped gains.

    sup over Dx of kp_bar ||x1|| + kd_bar ||x2|| + u_ex_max; the norm of
    a box is attained at a corner, so the corner norms suffice.  Also
    reports whether the origin-centered ball of this radius fits in
    Dxdot.
    """
    value = (kp_bar * domain.max_norm_x1()
             + kd_bar * domain.max_norm_x2()
             + domain.u_ex_max)
    return BoxBound(float(value), domain.ball_in_dxdot(value))


def xdot2_envelope(delta_bar: float, gains: GainSet, domain: DomainSpec) -> BoxBound:
    """Conservative closed-loop acceleration envelope over Dx.

    ||xdot2|| <= delta_bar + lmax(Kd) ||x2|| + lmax(Kp) ||x1|| + u_ex_max.
    """
    if delta_bar < 0.0:
        raise ContractViolation("delta_bar must be nonnegative")
    kd_max = float(np.linalg.eigvalsh(gains.Kd)[-1])
    kp_max = float(np.linalg.eigvalsh(gains.Kp)[-1])
    value = (delta_bar + kd_max * domain.max_norm_x2()
             + kp_max * domain.max_norm_x1() + domain.u_ex_max)
    return BoxBound(float(value), domain.ball_in_dxdot(value))


# ---------------------------------------------------------------------------
# radius, storage function, h
# ---------------------------------------------------------------------------

def passivity_radius(delta_bar: float, c: float, lambda_min: float) -> float:
    """Radius of the ball outside of which h is provably positive.

    With v = (1 + c) delta_bar / lambda_min, the quadratic bound on h
    turns positive for ||z|| > v, while the square-root form sqrt(v) is
    the familiar radius and dominates for v < 1.  The maximum of both is
    sound in either regime.
    """
    if lambda_min <= 0.0 or not np.isfinite(lambda_min):
        raise ContractViolation("lambda_min must be positive")
    if delta_bar < 0.0:
        raise ContractViolation("delta_bar must be nonnegative")
    v = (1.0 + c) * delta_bar / lambda_min
    return float(max(np.sqrt(v), v))


def storage_value(x, gains: GainSet) -> float:
    """Storage function V = 1/2 x1' Kp x1 + 1/2 x2' x2 + c x2' x1."""
    x = np.asarray(x, dtype=float).ravel()
    n = gains.n
    if x.size != 2 * n:
        raise ContractViolation(f"state must have dimension {2 * n}")
    x1, x2 = x[:n], x[n:]
    return float(0.5 * x1 @ gains.Kp @ x1 + 0.5 * x2 @ x2 + gains.c * (x2 @ x1))


def h_value(x, lambda_min: float, delta_bar: float, c: float) -> float:
    """Dissipation margin h = lmin ||(x2; x1)||^2 - D ||x2|| - c D ||x1||."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size // 2
    x1, x2 = x[:n], x[n:]
    z2 = float(x @ x)
    return float(lambda_min * z2
                 - delta_bar * np.linalg.norm(x2)
                 - c * delta_bar * np.linalg.norm(x1))


# ---------------------------------------------------------------------------
# certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PassivityCertificate:
    """All certificate quantities plus the verdict and its reasons.

    The verdict aggregates the provable obligations: L > 0, storage
    positivity, ball containment in Dx and the cap-based acceleration
    bound fitting in Dxdot.  The gain caps and the conservative
    closed-loop envelope are reported separately; they are informative
    but a benchmark tuning may deliberately exceed them.
    """

    gains: GainSet
    delta: float
    delta_bar: float
    lambda_min: float
    radius: float
    radius_sqrt: float
    radius_linear: float
    ball_in_dx: bool
    kd_bar: float
    kp_bar: float
    caps_ok: bool
    required_xdot: float
    required_xdot_in_dxdot: bool
    xdot_envelope: float
    envelope_in_dxdot: bool
    lambda_pd: bool
    schur_witness: float
    kp_exceeds_csq: bool
    verdict: bool
    reasons: tuple = ()


def certify(model, bound, gains: GainSet, domain: DomainSpec,
            kd_bar: float, kp_bar: float) -> PassivityCertificate:
    """Assemble the certificate for a trained model and chosen gains.

    ``bound`` only contributes its delta_bar and delta; ``model`` is
    accepted for interface symmetry with the pipeline and may be None.
    """
    pd, witness = is_lambda_pd(gains)
    lam = lambda_min_eig(gains)
    kp_min = float(np.linalg.eigvalsh(gains.Kp)[0])
    kp_ok = kp_min > gains.c ** 2
    reasons = []
    if not pd:
        reasons.append("dissipation matrix not positive definite")
    if not kp_ok:
        reasons.append("lambda_min(Kp) <= c^2")

    dbar = float(bound.delta_bar)
    if pd:
        v = (1.0 + gains.c) * dbar / lam
        radius_sqrt, radius_linear = float(np.sqrt(v)), float(v)
        radius = max(radius_sqrt, radius_linear)
    else:
        radius = radius_sqrt = radius_linear = float("nan")
    ball_ok = pd and domain.ball_in_dx(radius)
    if pd and not ball_ok:
        reasons.append("certificate ball not contained in Dx")

    req = required_xdot_bound(domain, kd_bar, kp_bar)
    if not req.contained:
        reasons.append("required acceleration bound exceeds Dxdot")
    env = xdot2_envelope(dbar, gains, domain)

    try:
        caps_ok = check_gain_caps(gains, kd_bar, kp_bar)
    except ContractViolation:
        caps_ok = False
        reasons.append("cap precondition on (kd_bar, kp_bar) violated")

    verdict = pd and kp_ok and ball_ok and req.contained
    return PassivityCertificate(
        gains=gains, delta=float(bound.delta), delta_bar=dbar, lambda_min=lam,
        radius=radius, radius_sqrt=radius_sqrt, radius_linear=radius_linear,
        ball_in_dx=ball_ok, kd_bar=float(kd_bar), kp_bar=float(kp_bar),
        caps_ok=caps_ok, required_xdot=req.value,
        required_xdot_in_dxdot=req.contained, xdot_envelope=env.value,
        envelope_in_dxdot=env.contained, lambda_pd=pd, schur_witness=witness,
        kp_exceeds_csq=kp_ok, verdict=verdict, reasons=tuple(reasons))


def save_certificate(cert: PassivityCertificate, path):
    g = cert.gains
    lines = [CERT_FORMAT, f"n {g.n}"]
    lines.append("Kd " + g17_seq(g.Kd.ravel()))
    lines.append("Kp " + g17_seq(g.Kp.ravel()))
    lines.append("c " + g17(g.c))
    for key in ("delta", "delta_bar", "lambda_min", "radius", "radius_sqrt",
                "radius_linear", "kd_bar", "kp_bar", "required_xdot",
                "xdot_envelope", "schur_witness"):
        lines.append(key + " " + g17(getattr(cert, key)))
    for key in ("ball_in_dx", "required_xdot_in_dxdot", "envelope_in_dxdot",
                "caps_ok", "lambda_pd", "kp_exceeds_csq", "verdict"):
        lines.append(key + " " + ("true" if getattr(cert, key) else "false"))
    lines.append(f"reasons {len(cert.reasons)}")
    for reason in cert.reasons:
        lines.append("- " + reason)
    write_lines(path, lines)


def load_certificate(path) -> PassivityCertificate:
    with open(path) as fh:
        raw = [line.rstrip("\n") for line in fh]
    if raw[0] != CERT_FORMAT:
        raise ContractViolation("unrecognized certificate format")
    kv = {}
    reasons = []
    nreasons = 0
    for line in raw[1:]:
        if not line.strip():
            continue
        if line.startswith("- "):
            reasons.append(line[2:])
            continue
        key, _, value = line.partition(" ")
        kv[key] = value
    n = int(kv["n"])
    gains = GainSet(
        Kd=np.array([float(t) for t in kv["Kd"].split()]).reshape(n, n),
        Kp=np.array([float(t) for t in kv["Kp"].split()]).reshape(n, n),
        c=float(kv["c"]))
    scalars = {key: float(kv[key]) for key in
               ("delta", "delta_bar", "lambda_min", "radius", "radius_sqrt",
                "radius_linear", "kd_bar", "kp_bar", "required_xdot",
                "xdot_envelope", "schur_witness")}
    flags = {key: kv[key] == "true" for key in
             ("ball_in_dx", "required_xdot_in_dxdot", "envelope_in_dxdot",
              "caps_ok", "lambda_pd", "kp_exceeds_csq", "verdict")}
    return PassivityCertificate(gains=gains, reasons=tuple(reasons),
                                **scalars, **flags)
