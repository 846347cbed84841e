"""Dense two-phase primal simplex with Bland's rule.

Every linear program in the package goes through :func:`solve_lp` or
:func:`solve_over_argmin`.  The basis inverse is recomputed from scratch at
every pivot; the problems handled here have at most a few hundred columns.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

TOL_FEAS = 1e-9
TOL_RC = 1e-9
TOL_PIVOT = 1e-9
COND_CAP = 1e13
MAX_PIVOTS = 50_000


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class LpProblem:
    """min c^T x  s.t.  G x <= g,  E x = e,  x >= lb.

    ``lb`` entries equal to ``-inf`` (the default for every variable) mark
    free variables.
    """

    c: np.ndarray
    G: np.ndarray | None = None
    g: np.ndarray | None = None
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    lb: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.size
        object.__setattr__(self, "c", c)
        for mat, rhs in (("G", "g"), ("E", "e")):
            M = getattr(self, mat)
            r = getattr(self, rhs)
            if M is None:
                M = np.zeros((0, n))
                r = np.zeros(0)
            M = np.asarray(M, dtype=float).reshape(-1, n)
            r = np.asarray(r, dtype=float).ravel()
            if M.shape[0] != r.size:
                raise ValueError(f"{mat} has {M.shape[0]} rows but {rhs} has {r.size} entries")
            object.__setattr__(self, mat, M)
            object.__setattr__(self, rhs, r)
        lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        if lb.size != n:
            raise ValueError("lb length does not match objective")
        object.__setattr__(self, "lb", lb)
        if self.G.shape[0] + self.E.shape[0] == 0 and not np.isfinite(lb).any() and n > 0:
            raise ValueError("LP without constraints or bounds")

    @property
    def n(self) -> int:
        return self.c.size


@dataclass(frozen=True)
class LpOutcome:
    status: Status
    x: np.ndarray | None = None
    value: float | None = None
    duals_ineq: np.ndarray | None = None
    duals_eq: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


@dataclass
class _StdResult:
    status: Status
    basis: list = field(default_factory=list)
    rows: np.ndarray | None = None  # indices of rows kept after redundancy removal
    x: np.ndarray | None = None
    y: np.ndarray | None = None  # duals for the kept rows
    rc: np.ndarray | None = None


def _iterate(cost, M, r, basis):
    """Primal simplex iterations from a feasible basis (Bland's rule).

    Returns (status, basis, Binv).
    """
    ncols = M.shape[1]
    for _ in range(MAX_PIVOTS):
        Binv = np.linalg.inv(M[:, basis])
        xB = Binv @ r
        y = Binv.T @ cost[basis]
        rc = cost - M.T @ y
        rc[basis] = 0.0
        candidates = np.nonzero(rc < -TOL_RC)[0]
        if candidates.size == 0:
            return Status.OPTIMAL, basis, Binv
        j = int(candidates[0])
        col = Binv @ M[:, j]
        rows = np.nonzero(col > TOL_PIVOT)[0]
        if rows.size == 0:
            return Status.UNBOUNDED, basis, Binv
        ratios = np.maximum(xB[rows], 0.0) / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * (1.0 + abs(best))]
        leave = min(ties, key=lambda i: basis[i])
        basis = list(basis)
        basis[leave] = j
    raise NumericalError(f"simplex did not terminate within {MAX_PIVOTS} pivots ({ncols} columns)")


def _solve_standard(c, M, r, basis=None) -> _StdResult:
    """min c^T x s.t. M x = r, x >= 0.

    With ``basis`` given it must be primal feasible and phase 1 is skipped.
    """
    c = np.asarray(c, dtype=float)
    M = np.array(M, dtype=float)
    r = np.array(r, dtype=float)
    nrows, ncols = M.shape
    rows = np.arange(nrows)
    if nrows == 0:
        if np.any(c < -TOL_RC):
            return _StdResult(Status.UNBOUNDED)
        return _StdResult(Status.OPTIMAL, [], rows, np.zeros(ncols), np.zeros(0), c.copy())

    if basis is None:
        flip = r < 0
        M[flip] *= -1.0
        r[flip] *= -1.0
        # reuse unit columns as the starting basis where possible
        basis = [-1] * nrows
        for j in range(ncols):
            col = M[:, j]
            nz = np.nonzero(col)[0]
            if nz.size == 1 and col[nz[0]] == 1.0 and basis[nz[0]] < 0:
                basis[nz[0]] = j
        art_rows = [i for i in range(nrows) if basis[i] < 0]
        if art_rows:
            A1 = np.zeros((nrows, len(art_rows)))
            for k, i in enumerate(art_rows):
                A1[i, k] = 1.0
                basis[i] = ncols + k
            M1 = np.hstack([M, A1])
            cost1 = np.concatenate([np.zeros(ncols), np.ones(len(art_rows))])
            status, basis, Binv = _iterate(cost1, M1, r, basis)
            xB = Binv @ r
            infeas = float(sum(xB[i] for i in range(nrows) if basis[i] >= ncols))
            if infeas > TOL_FEAS * (1.0 + np.abs(r).max()):
                return _StdResult(Status.INFEASIBLE)
            # drive remaining artificials out of the basis, dropping redundant rows
            keep = np.ones(nrows, dtype=bool)
            keep_pos = np.ones(nrows, dtype=bool)
            for i in range(nrows):
                if basis[i] < ncols:
                    continue
                tableau_row = (Binv @ M1)[i, :ncols]
                nonbasic = [j for j in range(ncols) if j not in basis and abs(tableau_row[j]) > 1e-9]
                if nonbasic:
                    basis[i] = max(nonbasic, key=lambda j: abs(tableau_row[j]))
                    Binv = np.linalg.inv(M1[:, basis])
                else:
                    # the artificial's own row is a combination of the others
                    keep[art_rows[basis[i] - ncols]] = False
                    keep_pos[i] = False
            if not keep.all():
                M = M[keep]
                r = r[keep]
                rows = rows[keep]
                basis = [b for b, k in zip(basis, keep_pos) if k]
                flip = flip[keep]
        sign = np.where(flip, -1.0, 1.0)
    else:
        sign = np.ones(nrows)
        if len(basis) != nrows:
            raise ValueError("initial basis size does not match row count")

    status, basis, Binv = _iterate(c, M, r, list(basis))
    if status is Status.UNBOUNDED:
        return _StdResult(Status.UNBOUNDED)
    Bm = M[:, basis]
    if np.linalg.cond(Bm, 1) > COND_CAP:
        raise NumericalError("basis matrix is ill-conditioned")
    x = np.zeros(M.shape[1])
    x[basis] = np.maximum(Binv @ r, 0.0)
    y = Binv.T @ c[basis]
    rc = c - M.T @ y
    rc[basis] = 0.0
    return _StdResult(Status.OPTIMAL, basis, rows, x, y * sign, rc)


def solve_lp(p: LpProblem) -> LpOutcome:
    """Solve ``p``; duals follow ``c = G^T duals_ineq + E^T duals_eq`` with
    ``duals_ineq <= 0`` for free variables."""
    n = p.n
    free = ~np.isfinite(p.lb)
    shift = np.where(free, 0.0, p.lb)
    # column map: bounded vars keep one column, free vars get (+, -) pair
    cols = []
    for j in range(n):
        cols.append((j, 1.0))
        if free[j]:
            cols.append((j, -1.0))
    ncol = len(cols)
    idx = np.array([j for j, _ in cols], dtype=int)
    sgn = np.array([s for _, s in cols])

    nG, nE = p.G.shape[0], p.E.shape[0]
    M = np.zeros((nG + nE, ncol + nG))
    M[:nG, :ncol] = p.G[:, idx] * sgn
    M[nG:, :ncol] = p.E[:, idx] * sgn
    M[:nG, ncol:] = np.eye(nG)
    r = np.concatenate([p.g - p.G @ shift, p.e - p.E @ shift])
    cost = np.concatenate([p.c[idx] * sgn, np.zeros(nG)])

    res = _solve_standard(cost, M, r)
    if res.status is not Status.OPTIMAL:
        return LpOutcome(res.status)
    xs = res.x[:ncol]
    x = shift.copy()
    np.add.at(x, idx, sgn * xs)
    duals = np.zeros(nG + nE)
    duals[res.rows] = res.y
    return LpOutcome(Status.OPTIMAL, x, float(p.c @ x), duals[:nG], duals[nG:])


def solve_over_argmin(d, q, A, rhs, direction: str = "min") -> LpOutcome:
    """Optimize ``q^T y`` over Argmin{ d^T y | A y <= rhs }.

    Stage 2 is restricted to the exact optimal face of stage 1: every column
    with a strictly positive stage-1 reduced cost is fixed at zero, and the
    stage-1 optimal basis is reused as the stage-2 starting basis.  The
    returned duals are the stage-1 multipliers (``d = A^T duals``, duals <= 0).
    """
    A = np.asarray(A, dtype=float)
    s, m = A.shape
    d = np.asarray(d, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    rhs = np.asarray(rhs, dtype=float).ravel()
    if direction not in ("min", "max"):
        raise ValueError("direction must be 'min' or 'max'")
    M = np.hstack([A, -A, np.eye(s)])
    dh = np.concatenate([d, -d, np.zeros(s)])
    qh = np.concatenate([q, -q, np.zeros(s)])

    stage1 = _solve_standard(dh, M, rhs)
    if stage1.status is not Status.OPTIMAL:
        return LpOutcome(stage1.status)

    keep = np.nonzero(stage1.rc <= TOL_RC)[0]
    pos = {j: k for k, j in enumerate(keep)}
    basis = [pos[j] for j in stage1.basis]
    M2 = M[np.ix_(stage1.rows, keep)]
    # row sign flips inside stage 1 do not change B^-1 r, so the basis stays feasible
    r2 = rhs[stage1.rows]
    cost2 = qh[keep] if direction == "min" else -qh[keep]
    stage2 = _solve_standard(cost2, M2, r2, basis=basis)
    if stage2.status is not Status.OPTIMAL:
        return LpOutcome(stage2.status)

    yh = np.zeros(M.shape[1])
    yh[keep] = stage2.x
    y = yh[:m] - yh[m:2 * m]
    duals = np.zeros(s)
    duals[stage1.rows] = stage1.y
    return LpOutcome(Status.OPTIMAL, y, float(q @ y), duals, np.zeros(0))
