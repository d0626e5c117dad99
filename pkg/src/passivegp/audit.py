"""Numerical audit of the dissipation inequality and its side conditions.

The certificate claims that outside the ball B_r the storage derivative
satisfies V' <= y_ex' u_ex - h(x) with h nonnegative there, that the
realized acceleration stays in Dxdot, and that the model error stays
under the variance-scaled pointwise bound.  This module checks all
three on recorded trajectories and grids.
"""

from dataclasses import dataclass

import numpy as np

from . import gp
from .domain import DomainSpec
from .dynamics import SystemDynamics, Trajectory, passive_output
from .errors import ContractViolation
from .passivation import GainSet, PassivityCertificate, h_value
from .textio import g17, write_lines


def vdot_numeric(state, xdot2, u_ex, gains: GainSet) -> float:
    """Analytic storage derivative along the flow.

    V' = (Kp x1 + c x2)' x2 + (x2 + c x1)' xdot2, evaluated from the
    recorded state and acceleration; no differencing of V is involved.
    """
    x = np.asarray(state, dtype=float).ravel()
    n = gains.n
    if x.size != 2 * n:
        raise ContractViolation(f"state must have dimension {2 * n}")
    a = np.atleast_1d(np.asarray(xdot2, dtype=float))
    x1, x2 = x[:n], x[n:]
    return float((gains.Kp @ x1 + gains.c * x2) @ x2 + (x2 + gains.c * x1) @ a)


@dataclass
class AuditReport:
    """Aggregated audit outcome; optional parts stay None until computed."""

    samples: int
    outside_ball: int
    excluded_outside_dx: int
    dissipation_violations: int
    max_violation: float
    h_violations: int
    tolerance: float
    pass_threshold: float          # tolerated violation fraction
    verdict: bool
    xdot_containment: float = None
    error_coverage: float = None

    @property
    def violation_fraction(self) -> float:
        if self.outside_ball == 0:
            return 0.0
        return max(self.dissipation_violations, self.h_violations) / self.outside_ball


def semipassivity_audit(states, xdot2, u_ex, cert: PassivityCertificate,
                        gains: GainSet, domain: DomainSpec,
                        tolerance: float = 1e-3) -> AuditReport:
    """Check V' <= y_ex' u_ex - h(x) + tol and h >= -tol outside B_r.

    ``states`` is (N, 2n) with matching (N, n) accelerations and
    external inputs.  Samples outside Dx are excluded (the error bound
    only holds inside) and counted separately.  The audit passes when
    the violation fraction does not exceed 1 - delta, the certificate's
    tolerated failure probability.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    xdot2 = np.atleast_2d(np.asarray(xdot2, dtype=float))
    u_ex = np.atleast_2d(np.asarray(u_ex, dtype=float))
    if not (states.shape[0] == xdot2.shape[0] == u_ex.shape[0]):
        raise ContractViolation("states, xdot2 and u_ex must have equal sample counts")

    outside = excluded = viol = hviol = 0
    worst = 0.0
    for i in range(states.shape[0]):
        x = states[i]
        if not domain.contains_state(x, tol=1e-12):
            excluded += 1
            continue
        if np.linalg.norm(x) <= cert.radius:
            continue
        outside += 1
        h = h_value(x, cert.lambda_min, cert.delta_bar, gains.c)
        vd = vdot_numeric(x, xdot2[i], u_ex[i], gains)
        supply = float(passive_output(x, gains.c) @ u_ex[i])
        gap = vd - (supply - h)
        if gap > tolerance:
            viol += 1
            worst = max(worst, gap)
        if h < -tolerance:
            hviol += 1

    threshold = 1.0 - cert.delta
    frac = 0.0 if outside == 0 else max(viol, hviol) / outside
    return AuditReport(samples=states.shape[0], outside_ball=outside,
                       excluded_outside_dx=excluded,
                       dissipation_violations=viol, max_violation=worst,
                       h_violations=hviol, tolerance=tolerance,
                       pass_threshold=threshold, verdict=frac <= threshold)


def audit_trajectory(traj: Trajectory, cert: PassivityCertificate,
                     gains: GainSet, domain: DomainSpec,
                     tolerance: float = 1e-3) -> AuditReport:
    """Dissipation audit over a recorded trajectory."""
    return semipassivity_audit(traj.states, traj.xdot2, traj.u_ex, cert,
                               gains, domain, tolerance)


def xdot_containment_check(traj: Trajectory, domain: DomainSpec) -> float:
    """Fraction of recorded accelerations inside Dxdot.

    The certificate requires 1.0; anything lower means the model was
    queried outside the region where the error bound holds.
    """
    inside = sum(domain.contains_xdot(a, tol=1e-12) for a in traj.xdot2)
    return inside / traj.xdot2.shape[0]


@dataclass
class CoverageReport:
    """Pointwise model-error coverage against the variance-scaled bound."""

    samples: int
    within_bound: int
    within_delta_bar: int
    coverage: float
    max_error: float
    max_bound: float


def model_error_empirical(model, sys: SystemDynamics, delta_vec, queries,
                          delta_bar: float = None) -> CoverageReport:
    """Compare |mean - f~| with the pointwise bound on query columns.

    ``queries`` is (3n, N) stacked (xdot2, x) points; ground truth comes
    from the plant inverse, f~ = f_inverse + xdot2.
    """
    Q = np.asarray(queries, dtype=float)
    if Q.ndim != 2:
        raise ContractViolation("queries must be a (3n, N) matrix")
    n = sys.n
    dv = np.atleast_1d(np.asarray(delta_vec, dtype=float))
    mean = np.atleast_2d(gp.predict_mean(model, Q))
    var = np.atleast_2d(gp.predict_var(model, Q))
    N = Q.shape[1]
    within = within_bar = 0
    max_err = max_bnd = 0.0
    for j in range(N):
        truth = sys.drift(Q[n:, j], Q[:n, j])
        err = float(np.linalg.norm(mean[j] - truth))
        bnd = float(np.linalg.norm(dv * np.sqrt(var[j])))
        within += err <= bnd
        max_err = max(max_err, err)
        max_bnd = max(max_bnd, bnd)
        if delta_bar is not None:
            within_bar += err <= delta_bar
    return CoverageReport(samples=N, within_bound=within,
                          within_delta_bar=within_bar, coverage=within / N,
                          max_error=max_err, max_bound=max_bnd)


# ---------------------------------------------------------------------------
# report text
# ---------------------------------------------------------------------------

AUDIT_FORMAT = "passivegp-audit v1"


def save_audit_report(report: AuditReport, path):
    lines = [
        AUDIT_FORMAT,
        f"samples {report.samples}",
        f"outside_ball {report.outside_ball}",
        f"excluded_outside_dx {report.excluded_outside_dx}",
        f"dissipation_violations {report.dissipation_violations}",
        "max_violation " + g17(report.max_violation),
        f"h_violations {report.h_violations}",
        "tolerance " + g17(report.tolerance),
        "pass_threshold " + g17(report.pass_threshold),
        "violation_fraction " + g17(report.violation_fraction),
        "verdict " + ("pass" if report.verdict else "fail"),
    ]
    if report.xdot_containment is not None:
        lines.append("xdot_containment " + g17(report.xdot_containment))
    if report.error_coverage is not None:
        lines.append("error_coverage " + g17(report.error_coverage))
    write_lines(path, lines)


def save_audit_samples_csv(states, xdot2, u_ex, cert, gains, path):
    """Optional per-sample dump: state, V', h, supply rate and margins."""
    from .passivation import storage_value
    states = np.atleast_2d(np.asarray(states, dtype=float))
    xdot2 = np.atleast_2d(np.asarray(xdot2, dtype=float))
    u_ex = np.atleast_2d(np.asarray(u_ex, dtype=float))
    n = gains.n
    from .dynamics import _channel_names
    header = (_channel_names("x1", n) + _channel_names("x2", n)
              + ["V", "vdot", "h", "supply", "margin"])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(states.shape[0]):
            x = states[i]
            vd = vdot_numeric(x, xdot2[i], u_ex[i], gains)
            h = h_value(x, cert.lambda_min, cert.delta_bar, gains.c)
            supply = float(passive_output(x, gains.c) @ u_ex[i])
            row = np.concatenate([x, [storage_value(x, gains), vd, h, supply,
                                      supply - h - vd]])
            fh.write(",".join(g17(v) for v in row) + "\n")
