"""Known basis systems for the regression coefficient and the loading curves.

Three constructions are provided:

* ``build_bspline``: clamped cubic B-splines with a second-difference penalty
  on the coefficients (used for the concurrent coefficient).
* ``build_lrtps``: low-rank thin-plate splines whose penalty has been
  diagonalised and whose columns have been orthonormalised on the grid
  (used for the wastewater loading curves).
* ``build_demmler_reinsch``: the Demmler-Reinsch basis of a P-spline with a
  knot at every grid point, truncated to the smoothest directions (used for
  the random-effect loading curves).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from lagfcr.errors import DimensionError

BSPLINE = "bspline_penalized"
LRTPS = "lrtps_orthogonalized"
DEMMLER_REINSCH = "demmler_reinsch"

_ZERO_EIG = 1e-10


@dataclass(frozen=True)
class Grid:
    """Daily grid of integer day indices.

    ``extension`` counts extra days that precede ``days[0]``; they are not part
    of ``days`` but are available through :meth:`full_days`.
    """

    days: np.ndarray
    extension: int = 0

    def __post_init__(self):
        days = np.asarray(self.days, dtype=np.int64)
        if days.ndim != 1 or days.size == 0:
            raise DimensionError("grid must be a non-empty 1-d array of days")
        if days.size > 1 and np.any(np.diff(days) != 1):
            raise DimensionError("grid days must be consecutive")
        if self.extension < 0:
            raise DimensionError("grid extension must be nonnegative")
        object.__setattr__(self, "days", days)

    @classmethod
    def regular(cls, length: int, extension: int = 0, start: int = 0) -> "Grid":
        return cls(np.arange(start, start + length), extension)

    def __len__(self):
        return self.days.size

    @property
    def full_length(self) -> int:
        return self.days.size + self.extension

    def full_days(self) -> np.ndarray:
        return np.arange(self.days[0] - self.extension, self.days[-1] + 1)

    def extended(self) -> "Grid":
        """The grid including the left extension, as a plain grid."""
        return Grid(self.full_days(), 0)


@dataclass(frozen=True)
class BasisSystem:
    kind: str
    eval: np.ndarray
    penalty: np.ndarray
    # raw-coefficient transform: raw = transform @ coef (None for B-splines)
    transform: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.eval.shape[1]


def second_difference_penalty(p: int) -> np.ndarray:
    d2 = np.diff(np.eye(p), 2, axis=0)
    return d2.T @ d2


def _design(x, knots, degree=3):
    return BSpline.design_matrix(x, knots, degree).toarray()


def build_bspline(grid: Grid, num_basis: int) -> BasisSystem:
    """Clamped cubic B-splines on equally spaced interior knots."""
    m = len(grid)
    if num_basis < 4:
        raise DimensionError("B-spline basis needs at least 4 functions")
    if m < num_basis:
        raise DimensionError(f"grid of length {m} is shorter than num_basis={num_basis}")
    x = grid.days.astype(float)
    lo, hi = x[0], x[-1]
    interior = np.linspace(lo, hi, num_basis - 2)[1:-1]
    knots = np.concatenate([[lo] * 4, interior, [hi] * 4])
    B = _design(x, knots)
    return BasisSystem(
        BSPLINE, B, second_difference_penalty(num_basis), meta={"knots": knots}
    )


def _orthogonalize(raw: np.ndarray, raw_penalty: np.ndarray):
    """Simultaneously orthonormalise ``raw`` and diagonalise its penalty.

    Returns (eval, eigenvalues, transform) with eval = raw @ transform,
    eval.T @ eval = I and transform.T @ raw_penalty @ transform = diag(eig).
    """
    q, r = np.linalg.qr(raw)
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    kp = rinv.T @ raw_penalty @ rinv
    kp = 0.5 * (kp + kp.T)
    eig, u = np.linalg.eigh(kp)
    eig = _clean_eigenvalues(eig)
    u = _fix_signs(q @ u, u)
    return q @ u, eig, rinv @ u


def _clean_eigenvalues(eig):
    eig = np.where(eig < _ZERO_EIG * max(1.0, np.abs(eig).max()), 0.0, eig)
    return np.maximum.accumulate(eig)


def _fix_signs(cols, *others):
    """Flip columns so the largest-magnitude entry of each is positive."""
    idx = np.argmax(np.abs(cols), axis=0)
    sign = np.sign(cols[idx, np.arange(cols.shape[1])])
    sign[sign == 0] = 1.0
    if others:
        return others[0] * sign
    return cols * sign


def build_lrtps(grid: Grid, num_basis: int) -> BasisSystem:
    """Low-rank thin-plate splines, orthonormalised with a diagonal penalty.

    The raw basis is ``[1, s, |s - k|^3 Omega_K^{-1/2}]`` on the grid rescaled
    to [0, 1], with knots ``k`` at grid quantiles; its penalty is the identity
    on the knot block and zero on the linear block.
    """
    m = len(grid)
    if num_basis < 3:
        raise DimensionError("LR-TPS basis needs at least 3 functions")
    if num_basis > m:
        raise DimensionError(f"num_basis={num_basis} exceeds grid length {m}")
    t = grid.days.astype(float)
    s = (t - t[0]) / max(t[-1] - t[0], 1.0)
    n_knots = num_basis - 2
    knots = np.quantile(np.unique(s), np.linspace(0, 1, n_knots + 2)[1:-1])

    zk = np.abs(s[:, None] - knots[None, :]) ** 3
    omega_k = np.abs(knots[:, None] - knots[None, :]) ** 3
    u, d, vt = np.linalg.svd(omega_k)
    # Z = Z_K (U sqrt(D) V')^{-1}; singular directions (a single knot) are left unscaled
    d = np.where(d > _ZERO_EIG * max(d.max(), 1.0), d, 1.0)
    z = zk @ (vt.T / np.sqrt(d)) @ u.T
    raw = np.column_stack([np.ones_like(s), s, z])
    raw_penalty = np.diag(np.r_[0.0, 0.0, np.ones(n_knots)])

    evals, eig, transform = _orthogonalize(raw, raw_penalty)
    return BasisSystem(
        LRTPS,
        evals,
        np.diag(eig),
        transform=transform,
        meta={"knots": knots, "raw": raw, "raw_penalty": raw_penalty},
    )


def _pspline_collocation(m: int):
    """Cubic B-splines on uniform knots at every grid point, extended 3 beyond
    each end, evaluated at the knots themselves (m rows, m + 2 columns)."""
    x = np.arange(m, dtype=float)
    knots = np.arange(-3, m + 3, dtype=float)
    B = _design(x, knots)
    return B


def build_demmler_reinsch(grid: Grid, num_basis: int) -> BasisSystem:
    """Demmler-Reinsch basis of a P-spline with a knot at every grid point.

    The P-spline coefficients outnumber the grid points by two, so the penalty
    of a grid function ``f`` is taken as the smallest second-difference
    penalty over all coefficient vectors reproducing ``f``. That quadratic
    form is eigendecomposed and the ``num_basis`` smoothest eigenvectors are
    kept.
    """
    m = len(grid)
    if num_basis < 1 or num_basis > m:
        raise DimensionError(f"num_basis={num_basis} not in [1, {m}]")
    B = _pspline_collocation(m)
    omega = second_difference_penalty(B.shape[1])

    u, sv, vt = np.linalg.svd(B)
    rank = int(np.sum(sv > 1e-12 * sv[0]))
    b_pinv = vt[:rank].T @ (u[:, :rank].T / sv[:rank, None])
    null = vt[rank:].T
    if null.shape[1]:
        on = omega @ null
        reduced = omega - on @ np.linalg.solve(null.T @ on, on.T)
    else:
        reduced = omega
    kf = b_pinv.T @ reduced @ b_pinv
    kf = 0.5 * (kf + kf.T)

    eig, vecs = np.linalg.eigh(kf)
    eig = _clean_eigenvalues(eig)
    vecs = _fix_signs(vecs)
    n0 = int(np.sum(eig == 0.0))
    if n0:
        # put the constant function first inside the null space
        const = np.full(m, 1.0 / np.sqrt(m))
        rest = vecs[:, :n0] - np.outer(const, const @ vecs[:, :n0])
        urest = np.linalg.svd(rest, full_matrices=False)[0]
        null_basis = np.column_stack([const, _fix_signs(urest[:, : n0 - 1])])
        vecs = np.column_stack([null_basis, vecs[:, n0:]])
    # the numerical null space is only resolved to ~eps/gap; re-orthonormalise
    q, r = np.linalg.qr(vecs[:, :num_basis])
    keep = q * np.sign(np.diag(r))

    return BasisSystem(
        DEMMLER_REINSCH,
        keep,
        np.diag(eig[:num_basis]),
        meta={"full_penalty": kf},
    )


def evaluate_subset(basis: BasisSystem, grid: Grid, indices) -> np.ndarray:
    """Rows of ``basis.eval`` at the given grid positions."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n_rows = basis.eval.shape[0]
    if n_rows != len(grid):
        raise DimensionError("basis and grid lengths differ")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"subset index out of range [0, {n_rows})")
    return basis.eval[idx]


def penalty_quadform(basis: BasisSystem, coef) -> float:
    coef = np.asarray(coef, dtype=float)
    return float(coef @ basis.penalty @ coef)


def ridged_penalty(penalty: np.ndarray, ridge_rel: float) -> np.ndarray:
    """Penalty plus ``ridge_rel`` times its smallest positive eigenvalue on
    the diagonal, which makes the implied Gaussian prior proper."""
    eig = np.linalg.eigvalsh(penalty)
    pos = eig[eig > _ZERO_EIG * max(1.0, np.abs(eig).max())]
    scale = pos.min() if pos.size else 1.0
    return penalty + ridge_rel * scale * np.eye(penalty.shape[0])
