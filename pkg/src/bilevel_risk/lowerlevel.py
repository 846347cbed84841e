"""The follower's response function f(x, z) and its basis representation.

Two independent routes evaluate ``f``:

* :func:`f_eval` solves the lower level and then optimizes the leader's
  follower cost over the lower-level optimal face (two LPs);
* :func:`f_eval_basis` scans the catalog of dual-feasible base matrices of
  the augmented system ``(A, -A, I) y_hat = T x + z, y_hat >= 0``.

The catalog also yields gradients, regions of stability and the hyperplane
tests that flag possible nondifferentiability.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, DomEmpty, LowerInfeasible, LowerUnbounded, NoFeasibleBasis
from .model import Instance, leader_samples
from .simplex import LpProblem, Status, solve_lp, solve_over_argmin

DET_TOL = 1e-10
TOL_FEAS = 1e-9
TOL_TIE = 1e-7
TOL_HYPER = 1e-8
TOL_MERGE = 1e-9
ENUMERATION_CAP = 200_000


def augmented(A, d, q):
    """Return (A_hat, d_hat, q_hat) for the split y = y+ - y- plus slacks."""
    A = np.asarray(A, dtype=float)
    s, m = A.shape
    A_hat = np.hstack([A, -A, np.eye(s)])
    d_hat = np.concatenate([d, -np.asarray(d, dtype=float), np.zeros(s)])
    q_hat = np.concatenate([q, -np.asarray(q, dtype=float), np.zeros(s)])
    return A_hat, d_hat, q_hat


def _group_rows(rows, tol):
    """Assign each row to the first earlier representative within ``tol`` (max-norm)."""
    reps = []
    groups = np.empty(len(rows), dtype=int)
    for i, r in enumerate(rows):
        for g, rep in enumerate(reps):
            if np.max(np.abs(r - rep), initial=0.0) <= tol:
                groups[i] = g
                break
        else:
            groups[i] = len(reps)
            reps.append(r)
    return groups, np.array(reps).reshape(len(reps), rows.shape[1] if rows.ndim == 2 else 0)


@dataclass(frozen=True)
class BasisCatalog:
    """Dual-feasible base matrices of the augmented lower level.

    Entry ``i`` stores the column set ``cols[i]`` (indices into A_hat, sorted,
    lexicographic order across entries), the inverse ``inv[i]``, the row
    ``lam[i] = q_hat_B^T A_hat_B^-1`` and ``delta[i] = lam[i] @ T``.
    """

    A_hat: np.ndarray
    d_hat: np.ndarray
    q_hat: np.ndarray
    T: np.ndarray
    cols: np.ndarray
    inv: np.ndarray
    lam: np.ndarray
    delta: np.ndarray
    delta_group: np.ndarray
    D: np.ndarray
    lam_group: np.ndarray
    n_regular: int

    def __len__(self):
        return self.cols.shape[0]

    @property
    def s(self) -> int:
        return self.A_hat.shape[0]

    def basic_solutions(self, rhs) -> np.ndarray:
        """A_hat_B^-1 rhs for every entry; ``rhs`` is (s,) or (N, s)."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return np.einsum("bij,j->bi", self.inv, rhs)
        return np.einsum("bij,nj->nbi", self.inv, rhs)

    def lipschitz_bound(self, c) -> float:
        """||c|| + max_B ||lam_B|| (||T|| + 1), a Lipschitz constant of f on F."""
        lam_norm = np.linalg.norm(self.lam, axis=1).max() if len(self) else 0.0
        return float(np.linalg.norm(c) + lam_norm * (np.linalg.norm(self.T, 2) + 1.0))

    def to_dict(self) -> dict:
        return {
            "n_regular": self.n_regular,
            "n_dual_feasible": len(self),
            "entries": [
                {"cols": c.tolist(), "lam": l.tolist(), "delta": dl.tolist()}
                for c, l, dl in zip(self.cols, self.lam, self.delta)
            ],
            "D": self.D.tolist(),
        }


def build_catalog(A, T, d, q, cap: int = ENUMERATION_CAP) -> BasisCatalog:
    A = np.asarray(A, dtype=float)
    T = np.asarray(T, dtype=float)
    s, m = A.shape
    A_hat, d_hat, q_hat = augmented(A, np.asarray(d, float).reshape(m), np.asarray(q, float).reshape(m))
    ncols = A_hat.shape[1]
    total = math.comb(ncols, s)
    if total > cap:
        raise CapExceeded(f"{total} candidate base matrices exceed the enumeration cap {cap}")
    combos = np.array(list(itertools.combinations(range(ncols), s)), dtype=int).reshape(total, s)
    mats = np.transpose(A_hat[:, combos], (1, 0, 2))  # (N, s, s)
    norms = np.linalg.norm(mats, axis=1, keepdims=True)
    scaled = mats / np.where(norms > 0, norms, 1.0)
    regular = np.abs(np.linalg.det(scaled)) > DET_TOL
    combos, mats = combos[regular], mats[regular]
    n_regular = combos.shape[0]
    inv = np.linalg.inv(mats) if n_regular else np.zeros((0, s, s))
    # reduced costs d_hat^T - d_hat_B^T A_B^-1 A_hat
    dual = np.einsum("bi,bij->bj", d_hat[combos], inv)
    rc = d_hat[None, :] - dual @ A_hat
    feasible = np.all(rc >= -TOL_FEAS * (1.0 + np.abs(d_hat).max(initial=0.0)), axis=1)
    combos, inv = combos[feasible], inv[feasible]
    lam = np.einsum("bi,bij->bj", q_hat[combos], inv)
    delta = lam @ T
    delta_group, D = _group_rows(delta, TOL_MERGE)
    lam_group, _ = _group_rows(lam, TOL_MERGE)
    return BasisCatalog(A_hat, d_hat, q_hat, T, combos, inv, lam, delta, delta_group, D, lam_group, n_regular)


def enumerate_bases(inst: Instance, cap: int = ENUMERATION_CAP) -> BasisCatalog:
    return build_catalog(inst.A, inst.T, inst.d, inst.q, cap)


# -- LP route --------------------------------------------------------------

def membership_F(inst: Instance, x, z) -> bool:
    rhs = inst.T @ np.asarray(x, dtype=float) + np.asarray(z, dtype=float)
    return solve_lp(LpProblem(c=np.zeros(inst.m), G=inst.A, g=rhs)).optimal


def f_eval(inst: Instance, x, k: int, z=None):
    """Return (f(x, Z_k), attaining y); ``z`` overrides the scenario atom."""
    x = np.asarray(x, dtype=float)
    zk = inst.Z[k] if z is None else np.asarray(z, dtype=float)
    rhs = inst.T @ x + zk
    out = solve_over_argmin(inst.d, inst.q, inst.A, rhs, "max" if inst.pessimistic else "min")
    if out.status is Status.INFEASIBLE:
        raise LowerInfeasible(f"lower level infeasible for scenario {k}", scenario=k)
    if out.status is Status.UNBOUNDED:
        raise LowerUnbounded(f"lower level or follower cost unbounded for scenario {k}")
    return float(inst.c @ x) + out.value, out.x


@dataclass(frozen=True)
class DomCertificate:
    feasible_point: tuple  # (x, z, y)
    dual_u: np.ndarray
    bounded: bool


def check_dom_f(inst: Instance) -> DomCertificate:
    """Certify dom f != {} through the three linear-programming conditions."""
    xs = leader_samples(inst) or [np.zeros(inst.n)]
    x0 = xs[0]
    point = None
    for z in [*inst.Z, -inst.T @ x0]:
        rhs = inst.T @ x0 + z
        out = solve_lp(LpProblem(c=np.zeros(inst.m), G=inst.A, g=rhs))
        if out.optimal:
            point = (x0, np.array(z), out.x)
            break
    if point is None:  # unreachable: y = 0 is feasible for z = -T x0
        raise DomEmpty("lower level empty for every probe", condition=1)

    # u <= 0 with A^T u = d
    dual = solve_lp(LpProblem(c=np.zeros(inst.s), G=np.eye(inst.s), g=np.zeros(inst.s), E=inst.A.T, e=inst.d))
    if not dual.optimal:
        raise DomEmpty("no u <= 0 with A^T u = d: lower level unbounded everywhere", condition=2)

    x, z, _ = point
    out = solve_over_argmin(inst.d, inst.q, inst.A, inst.T @ x + z, "max" if inst.pessimistic else "min")
    if out.status is not Status.OPTIMAL:
        raise DomEmpty("follower cost q is unbounded on the lower-level solution set", condition=3)
    return DomCertificate(point, dual.x, True)


# -- basis route -----------------------------------------------------------

def _select(catalog: BasisCatalog, c, x, rhs, pessimistic: bool):
    """Feasible mask, candidate values and the selected value at one point."""
    xb = catalog.basic_solutions(rhs)
    scale = 1.0 + np.abs(rhs).max(initial=0.0)
    feas = np.all(xb >= -TOL_FEAS * scale, axis=1)
    vals = float(c @ x) + catalog.lam @ rhs
    return xb, feas, vals


def f_eval_basis(inst: Instance, catalog: BasisCatalog, x, k: int, z=None) -> float:
    """f(x, Z_k) from the catalog alone (min over feasible bases; max if pessimistic)."""
    x = np.asarray(x, dtype=float)
    zk = inst.Z[k] if z is None else np.asarray(z, dtype=float)
    rhs = inst.T @ x + zk
    _, feas, vals = _select(catalog, inst.c, x, rhs, inst.pessimistic)
    if not feas.any():
        raise NoFeasibleBasis(f"no feasible dual-feasible basis for scenario {k}")
    v = vals[feas]
    return float(v.max() if inst.pessimistic else v.min())


def f_eval_basis_batch(inst: Instance, catalog: BasisCatalog, X, Zs) -> np.ndarray:
    """Vectorized :func:`f_eval_basis` over paired rows of X (N, n) and Zs (N, s).

    Points outside F get NaN.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Zs = np.atleast_2d(np.asarray(Zs, dtype=float))
    rhs = X @ inst.T.T + Zs
    xb = catalog.basic_solutions(rhs)  # (N, B, s)
    scale = 1.0 + np.abs(rhs).max(axis=1, keepdims=True)
    feas = np.all(xb >= -TOL_FEAS * scale[:, :, None], axis=2)
    vals = (X @ inst.c)[:, None] + rhs @ catalog.lam.T
    fill = -np.inf if inst.pessimistic else np.inf
    vals = np.where(feas, vals, fill)
    out = vals.max(axis=1) if inst.pessimistic else vals.min(axis=1)
    out[~feas.any(axis=1)] = np.nan
    return out


def region_membership(inst: Instance, catalog: BasisCatalog, basis_id: int, x, k: int, z=None) -> bool:
    x = np.asarray(x, dtype=float)
    zk = inst.Z[k] if z is None else np.asarray(z, dtype=float)
    rhs = inst.T @ x + zk
    xb = catalog.inv[basis_id] @ rhs
    if np.any(xb < -TOL_FEAS * (1.0 + np.abs(rhs).max(initial=0.0))):
        return False
    try:
        f = f_eval_basis(inst, catalog, x, k, z=zk)
    except NoFeasibleBasis:
        return False
    val = float(inst.c @ x + catalog.lam[basis_id] @ rhs)
    return abs(val - f) <= TOL_TIE * (1.0 + abs(f))


@dataclass(frozen=True)
class DiffEntry:
    """Hyperplane tests for one scenario at one leader point."""

    on_F_boundary: bool
    on_Z_boundary: bool
    on_V_hyperplane: bool

    @property
    def differentiable(self) -> bool:
        return not (self.on_F_boundary or self.on_Z_boundary or self.on_V_hyperplane)


@dataclass(frozen=True)
class DiffReport:
    entries: tuple

    @property
    def differentiable(self) -> bool:
        return all(e.differentiable for e in self.entries)


def slater_margin(A, rhs) -> float:
    """max delta (capped at 1) with A y + delta <= rhs; negative exactly outside F."""
    A = np.asarray(A, dtype=float)
    s, m = A.shape
    G = np.vstack([np.hstack([A, np.ones((s, 1))]), np.hstack([np.zeros((1, m)), [[1.0]]])])
    g = np.concatenate([rhs, [1.0]])
    out = solve_lp(LpProblem(c=np.concatenate([np.zeros(m), [-1.0]]), G=G, g=g))
    return float(out.x[-1])


def hyperplane_hit(values, groups, tol) -> bool:
    """True if two values from different groups lie within ``tol``."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    g = groups[order]
    for i in range(len(v)):
        j = i + 1
        while j < len(v) and v[j] - v[i] <= tol:
            if g[j] != g[i]:
                return True
            j += 1
    return False


def diff_entry(inst: Instance, catalog: BasisCatalog, x, z) -> DiffEntry:
    """Boundary, basis-face and hyperplane tests for f(., z) at x.

    The tests characterize the kinks of the optimistic value function; for the
    pessimistic sense they are applied unchanged and are only a heuristic.
    """
    rhs = inst.T @ np.asarray(x, dtype=float) + np.asarray(z, dtype=float)
    margin = slater_margin(inst.A, rhs)
    if margin < -TOL_HYPER:
        raise LowerInfeasible("point outside F")
    on_F = margin <= TOL_HYPER
    xb = catalog.basic_solutions(rhs)
    mins = xb.min(axis=1) if len(catalog) else np.zeros(0)
    on_Z = bool(np.any(np.abs(mins) <= TOL_HYPER))
    on_V = hyperplane_hit(catalog.lam @ rhs, catalog.lam_group, TOL_HYPER)
    return DiffEntry(bool(on_F), on_Z, on_V)


def attaining_bases(inst: Instance, catalog: BasisCatalog, x, z) -> np.ndarray:
    """Indices (lexicographic order) of feasible bases attaining f(x, z)."""
    x = np.asarray(x, dtype=float)
    rhs = inst.T @ x + np.asarray(z, dtype=float)
    _, feas, vals = _select(catalog, inst.c, x, rhs, inst.pessimistic)
    if not feas.any():
        raise LowerInfeasible("point outside F")
    best = vals[feas].max() if inst.pessimistic else vals[feas].min()
    return np.nonzero(feas & (np.abs(vals - best) <= TOL_TIE * (1.0 + abs(best))))[0]


def grad_f(inst: Instance, catalog: BasisCatalog, x, k: int, z=None):
    """Return (gradient c + delta_B, DiffEntry, basis index) at (x, Z_k)."""
    x = np.asarray(x, dtype=float)
    zk = inst.Z[k] if z is None else np.asarray(z, dtype=float)
    try:
        idx = attaining_bases(inst, catalog, x, zk)
    except LowerInfeasible:
        raise LowerInfeasible(f"lower level infeasible for scenario {k}", scenario=k) from None
    b = int(idx[0])
    return inst.c + catalog.delta[b], diff_entry(inst, catalog, x, zk), b
