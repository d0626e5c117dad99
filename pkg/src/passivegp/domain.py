"""Axis-aligned working domains for states and accelerations.

The regression, the error bound and the certificate are only valid on a
compact state box ``Dx`` (dimension 2n) paired with an acceleration box
``Dxdot`` (dimension n).  GP queries stack the acceleration first, so a
query point lives in ``Dxdot x Dx`` and has dimension 3n.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


def _as_box(lo, hi, name):
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ContractViolation(f"{name}: bounds must be 1-D and of equal length")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ContractViolation(f"{name}: bounds must be finite")
    if np.any(hi <= lo):
        raise ContractViolation(f"{name}: every upper bound must exceed the lower bound")
    return lo, hi


@dataclass(frozen=True)
class DomainSpec:
    """Working domain: state box, acceleration box and external-input cap.

    Parameters
    ----------
    dx_lo, dx_hi : array_like, shape (2n,)
        Bounds of the state box Dx, axes ordered (x1, x2).  The origin
        must lie in the interior.
    dxdot_lo, dxdot_hi : array_like, shape (n,)
        Bounds of the acceleration box Dxdot.
    u_ex_max : float
        Bound on the norm of the external input.
    """

    dx_lo: np.ndarray
    dx_hi: np.ndarray
    dxdot_lo: np.ndarray
    dxdot_hi: np.ndarray
    u_ex_max: float = 0.0

    def __post_init__(self):
        dx_lo, dx_hi = _as_box(self.dx_lo, self.dx_hi, "Dx")
        dd_lo, dd_hi = _as_box(self.dxdot_lo, self.dxdot_hi, "Dxdot")
        if dx_lo.size % 2 != 0:
            raise ContractViolation("Dx must have even dimension (x1 and x2 blocks)")
        if dx_lo.size != 2 * dd_lo.size:
            raise ContractViolation("Dx must have twice the dimension of Dxdot")
        if np.any(dx_lo >= 0.0) or np.any(dx_hi <= 0.0):
            raise ContractViolation("origin must lie in the interior of Dx")
        if not np.isfinite(self.u_ex_max) or self.u_ex_max < 0.0:
            raise ContractViolation("u_ex_max must be finite and nonnegative")
        for arr, name in ((dx_lo, "dx_lo"), (dx_hi, "dx_hi"),
                          (dd_lo, "dxdot_lo"), (dd_hi, "dxdot_hi")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "u_ex_max", float(self.u_ex_max))

    @property
    def n(self) -> int:
        """Half state dimension."""
        return self.dxdot_lo.size

    # -- membership ---------------------------------------------------

    def contains_state(self, x, tol=0.0) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        return bool(np.all(x >= self.dx_lo - tol) and np.all(x <= self.dx_hi + tol))

    def contains_xdot(self, a, tol=0.0) -> bool:
        a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
        return bool(np.all(a >= self.dxdot_lo - tol) and np.all(a <= self.dxdot_hi + tol))

    def contains_query(self, q, tol=0.0) -> bool:
        """Membership of a stacked (xdot2, x) query in Dxdot x Dx."""
        q = np.asarray(q, dtype=float).ravel()
        n = self.n
        if q.size != 3 * n:
            raise ContractViolation(f"query must have dimension {3 * n}, got {q.size}")
        return self.contains_xdot(q[:n], tol) and self.contains_state(q[n:], tol)

    def ball_in_dx(self, radius) -> bool:
        """Whether the origin-centered ball of this radius fits inside Dx."""
        return bool(radius <= np.min(np.minimum(-self.dx_lo, self.dx_hi)))

    def ball_in_dxdot(self, radius) -> bool:
        return bool(radius <= np.min(np.minimum(-self.dxdot_lo, self.dxdot_hi)))

    # -- extremal norms over the state box -----------------------------

    def max_norm_x1(self) -> float:
        """sup of ||x1|| over Dx, attained at a box corner."""
        n = self.n
        return float(np.linalg.norm(np.maximum(np.abs(self.dx_lo[:n]), np.abs(self.dx_hi[:n]))))

    def max_norm_x2(self) -> float:
        n = self.n
        return float(np.linalg.norm(np.maximum(np.abs(self.dx_lo[n:]), np.abs(self.dx_hi[n:]))))

    # -- grids ----------------------------------------------------------

    def query_grid(self, resolution):
        """Regular lattice on Dxdot x Dx, returned as (3n, N) columns.

        ``resolution`` is an int applied to every axis or a sequence of
        per-axis counts ordered (xdot axes, x axes).
        """
        lo = np.concatenate([self.dxdot_lo, self.dx_lo])
        hi = np.concatenate([self.dxdot_hi, self.dx_hi])
        counts = _per_axis_counts(resolution, lo.size)
        axes = [np.linspace(lo[k], hi[k], counts[k]) for k in range(lo.size)]
        return cartesian_columns(axes), counts

    def state_grid(self, resolution):
        """Regular lattice on Dx, returned as (2n, N) columns."""
        counts = _per_axis_counts(resolution, self.dx_lo.size)
        axes = [np.linspace(self.dx_lo[k], self.dx_hi[k], counts[k])
                for k in range(self.dx_lo.size)]
        return cartesian_columns(axes), counts


def _per_axis_counts(resolution, naxes):
    if np.isscalar(resolution):
        counts = [int(resolution)] * naxes
    else:
        counts = [int(r) for r in resolution]
        if len(counts) != naxes:
            raise ContractViolation(f"expected {naxes} per-axis counts, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise ContractViolation("grid resolution must be at least 1 per axis")
    return tuple(counts)


def cartesian_columns(axes):
    """Cartesian product of 1-D axes as a (len(axes), N) column matrix.

    The first axis varies slowest, matching C-order iteration.
    """
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.vstack([m.ravel() for m in mesh])
