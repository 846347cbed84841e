"""Single-level complementarity reformulation of a GenericBilevel.

Multipliers are handled internally as ``p = -v >= 0`` so every variable
bound is a lower bound.  The complementarity residual

    phi(u, w, p) = p^T (B u + b - W w) = t^T w + b^T p + p^T B u

is nonnegative on the linear part of the feasible set; its only nonconvex
piece is the bilinear term ``p^T B u``.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .detequiv import GenericBilevel
from .errors import CapExceeded, LowerInfeasible, LowerUnbounded, OracleInfeasible, OracleUnbounded, RelaxedInfeasible
from .simplex import LpProblem, Status, solve_lp, solve_over_argmin

TOL_FEAS = 1e-9
TOL_KKT = 1e-7
PATTERN_CAP = 20
MULTISTART_ROWS = 6
TR_RADIUS = 1.0
TR_MIN = 1e-10
SLP_MAX_ITER = 500
TIGHTEN_TRIES = 3
MOVE_TOL = 1e-9


@dataclass(frozen=True)
class Mpcc:
    gb: GenericBilevel

    @property
    def k(self):
        return self.gb.k

    @property
    def l(self):
        return self.gb.l

    @property
    def r(self):
        return self.gb.r

    @property
    def nvar(self):
        return self.k + self.l + self.r

    def split(self, z):
        k, l = self.k, self.l
        return z[:k], z[k:k + l], z[k + l:]

    def objective(self, z) -> float:
        u, w, _ = self.split(z)
        return float(self.gb.g @ u + self.gb.h @ w)

    def slack(self, z):
        u, w, _ = self.split(z)
        return self.gb.B @ u + self.gb.b - self.gb.W @ w

    def residual(self, z) -> float:
        """v^T (W w - B u - b), i.e. p^T slack."""
        _, _, p = self.split(z)
        return float(p @ self.slack(z))

    def residual_grad(self, z):
        u, w, p = self.split(z)
        gb = self.gb
        return np.concatenate([gb.B.T @ p, gb.t, gb.B @ u + gb.b])

    def linear_rows(self):
        """(G, g, E, e, lb) of the linear part over z = (u, w, p)."""
        gb, k, l, r = self.gb, self.k, self.l, self.r
        nU = gb.Hu.shape[0]
        G = np.zeros((nU + r, self.nvar))
        G[:nU, :k] = gb.Hu
        G[nU:, :k] = -gb.B
        G[nU:, k:k + l] = gb.W
        g = np.concatenate([gb.hu, gb.b])
        E = np.zeros((l, self.nvar))
        E[:, k + l:] = -gb.W.T
        lb = np.concatenate([np.full(k + l, -np.inf), np.zeros(r)])
        return G, g, E, gb.t.copy(), lb

    def cost(self):
        return np.concatenate([self.gb.g, self.gb.h, np.zeros(self.r)])

    def point(self, z):
        """(u, w, v) with the sign convention v <= 0."""
        u, w, p = self.split(np.asarray(z, dtype=float))
        return u.copy(), w.copy(), 0.0 - p

    def linear_violation(self, z) -> float:
        G, g, E, e, lb = self.linear_rows()
        viol = [np.max(G @ z - g, initial=0.0), np.max(np.abs(E @ z - e), initial=0.0),
                np.max(lb - z, initial=0.0)]
        return float(max(viol))


def build_kkt(gb: GenericBilevel) -> Mpcc:
    return Mpcc(gb)


def _pack(mp: Mpcc, u, w, v):
    return np.concatenate([np.asarray(u, float), np.asarray(w, float), -np.asarray(v, float)])


# -- global oracle ---------------------------------------------------------

@dataclass
class OracleResult:
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray
    objective: float
    nodes: int = 0


def _pattern_lp(mp: Mpcc, active, zero):
    """LP over the linear part with rows in ``active`` tight and p_i = 0 for ``zero``."""
    G, g, E, e, lb = mp.linear_rows()
    nU = mp.gb.Hu.shape[0]
    k, l = mp.k, mp.l
    tight = [nU + i for i in active]
    keep = np.ones(G.shape[0], dtype=bool)
    keep[tight] = False
    E2 = [E, G[tight]]
    e2 = [e, g[tight]]
    if zero:
        Z = np.zeros((len(zero), mp.nvar))
        for j, i in enumerate(zero):
            Z[j, k + l + i] = 1.0
        E2.append(Z)
        e2.append(np.zeros(len(zero)))
    return solve_lp(LpProblem(mp.cost(), G[keep], g[keep], np.vstack(E2), np.concatenate(e2), lb))


def _complementary(mp: Mpcc, z) -> bool:
    _, _, p = mp.split(z)
    s = mp.slack(z)
    return bool(np.all(np.minimum(np.abs(p), np.abs(s)) <= TOL_FEAS * (1.0 + np.abs(mp.gb.b))))


def global_oracle(mp: Mpcc, pattern_cap: int = PATTERN_CAP) -> OracleResult:
    """Exact global minimum over all complementarity patterns.

    Depth-first over rows (row 0 decided first, multiplier-zero branch before
    the tight-row branch) with LP-bound pruning; a relaxation whose solution is
    already complementary closes its subtree.
    """
    r = mp.r
    if r > pattern_cap:
        raise CapExceeded(f"{r} complementarity rows exceed the pattern cap {pattern_cap}")
    best = {"z": None, "val": math.inf}
    nodes = 0

    def visit(depth, active, zero):
        nonlocal nodes
        nodes += 1
        out = _pattern_lp(mp, active, zero)
        if out.status is Status.INFEASIBLE:
            return
        if out.status is Status.OPTIMAL:
            inc = best["val"]
            if out.value >= inc - 1e-10 * (1.0 + abs(inc)):
                return
            if depth == r or _complementary(mp, out.x):
                best["z"], best["val"] = out.x, out.value
                return
        elif depth == r:
            raise OracleUnbounded("a complementarity pattern has an unbounded objective")
        visit(depth + 1, active, zero + [depth])
        visit(depth + 1, active + [depth], zero)

    visit(0, [], [])
    if best["z"] is None:
        raise OracleInfeasible("every complementarity pattern is infeasible")
    u, w, v = mp.point(best["z"])
    return OracleResult(u, w, v, best["val"], nodes)


# -- relaxed problems and the path ------------------------------------------

@dataclass
class RelaxedResult:
    u: np.ndarray
    w: np.ndarray
    v: np.ndarray
    objective: float
    residual: float
    kkt: bool
    iterations: int = 0


def initial_point(mp: Mpcc):
    """High-point relaxation leader paired with its optimistic lower-level response."""
    gb = mp.gb
    k, l = mp.k, mp.l
    G = np.vstack([np.hstack([gb.Hu, np.zeros((gb.Hu.shape[0], l))]), np.hstack([-gb.B, gb.W])])
    g = np.concatenate([gb.hu, gb.b])
    u0 = None
    for cost in (np.concatenate([gb.g, gb.h]), np.concatenate([gb.g, np.zeros(l)]), np.zeros(k + l)):
        out = solve_lp(LpProblem(cost, G, g))
        if out.optimal:
            u0 = out.x[:k]
            break
        if out.status is Status.INFEASIBLE:
            raise RelaxedInfeasible("no leader decision admits a feasible lower level")
    if u0 is None:
        raise RelaxedInfeasible("could not find a leader decision")
    return start_from_leader(mp, u0)


def start_from_leader(mp: Mpcc, u):
    """Complementary point (u, w, v) with w the optimistic response at ``u``."""
    gb = mp.gb
    out = solve_over_argmin(gb.t, gb.h, gb.W, gb.B @ u + gb.b, "min")
    if out.status is Status.INFEASIBLE:
        raise LowerInfeasible("lower level infeasible at the start leader")
    if out.status is Status.UNBOUNDED:
        raise LowerUnbounded("lower level unbounded at the start leader")
    return _pack(mp, u, out.x, out.duals_ineq)


def _restore(mp: Mpcc, z, eps):
    """Keep u, re-solve (w, p) minimizing the residual (linear once u is fixed)."""
    gb = mp.gb
    u = mp.split(z)[0]
    if np.any(gb.Hu @ u > gb.hu + TOL_FEAS * (1.0 + np.abs(gb.hu))):
        return None
    l, r = mp.l, mp.r
    cost = np.concatenate([gb.t, gb.B @ u + gb.b])
    G = np.hstack([gb.W, np.zeros((r, r))])
    E = np.hstack([np.zeros((l, l)), -gb.W.T])
    lb = np.concatenate([np.full(l, -np.inf), np.zeros(r)])
    out = solve_lp(LpProblem(cost, G, gb.B @ u + gb.b, E, gb.t, lb))
    if not out.optimal or out.value > eps + TOL_FEAS:
        return None
    return np.concatenate([u, out.x])


def _feasible(mp: Mpcc, z, eps) -> bool:
    scale = 1.0 + max(np.abs(mp.gb.b).max(initial=0.0), np.abs(mp.gb.hu).max(initial=0.0))
    return mp.linear_violation(z) <= TOL_FEAS * scale and mp.residual(z) <= eps + TOL_FEAS


def _slp_step(mp: Mpcc, z, eps, radius, tighten):
    G, g, E, e, lb = mp.linear_rows()
    grad = mp.residual_grad(z)
    phi0 = mp.residual(z)
    # linearized residual: phi0 + grad (y - z) <= eps - tighten
    G2 = np.vstack([G, grad, np.eye(mp.nvar)])
    g2 = np.concatenate([g, [eps - tighten - phi0 + grad @ z], z + radius])
    lb2 = np.maximum(lb, z - radius)
    return solve_lp(LpProblem(mp.cost(), G2, g2, E, e, lb2))


def _kkt_holds(mp: Mpcc, z, eps) -> bool:
    """No first-order descent direction within the unit box at ``z``."""
    G, g, E, e, lb = mp.linear_rows()
    scale = TOL_FEAS * (1.0 + np.abs(g))
    act = G @ z >= g - scale
    rows = [G[act]]
    bound_act = np.isfinite(lb) & (z <= lb + TOL_FEAS)
    rows.append(-np.eye(mp.nvar)[bound_act])
    if mp.residual(z) >= eps - TOL_FEAS:
        rows.append(mp.residual_grad(z)[None, :])
    Gd = np.vstack(rows + [np.eye(mp.nvar), -np.eye(mp.nvar)])
    gd = np.concatenate([np.zeros(sum(rw.shape[0] for rw in rows)), np.ones(2 * mp.nvar)])
    out = solve_lp(LpProblem(mp.cost(), Gd, gd, E, np.zeros(E.shape[0])))
    return out.optimal and out.value >= -TOL_KKT


def solve_relaxed(mp: Mpcc, eps: float, start=None) -> RelaxedResult:
    """Local solution of the relaxed problem (residual <= eps) by trust-region SLP."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    z = None
    if start is not None:
        z = np.asarray(start, dtype=float)
        if not _feasible(mp, z, eps):
            z = _restore(mp, z, eps)
    if z is None:
        z = initial_point(mp)
    radius = TR_RADIUS
    it = 0
    obj = mp.objective(z)
    while radius > TR_MIN and it < SLP_MAX_ITER:
        it += 1
        tighten = 0.0
        accepted = False
        for attempt in range(TIGHTEN_TRIES + 1):
            out = _slp_step(mp, z, eps, radius, tighten)
            if not out.optimal:
                break
            if out.value >= obj - 1e-12 * (1.0 + abs(obj)):
                if attempt == 0:
                    radius = 0.0  # linearization admits no descent: first-order stationary
                break
            cand = out.x
            if _feasible(mp, cand, eps):
                z, obj, accepted = cand, mp.objective(cand), True
                break
            tighten += mp.residual(cand) - eps
        if not accepted and radius > 0:
            radius *= 0.5
    u, w, v = mp.point(z)
    return RelaxedResult(u, w, v, obj, mp.residual(z), _kkt_holds(mp, z, eps), it)


@dataclass
class PathTrace:
    eps: list = field(default_factory=list)
    points: list = field(default_factory=list)  # (u, w, v)
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)

    def append(self, eps, res: RelaxedResult):
        self.eps.append(float(eps))
        self.points.append((res.u, res.w, res.v))
        self.objective.append(res.objective)
        self.residual.append(res.residual)

    def __len__(self):
        return len(self.eps)

    def header(self):
        if not self.points:
            return ["eps", "objective", "comp_residual"]
        u, w, v = self.points[0]
        return (["eps", "objective", "comp_residual"] + [f"u{i}" for i in range(len(u))]
                + [f"w{i}" for i in range(len(w))] + [f"v{i}" for i in range(len(v))])

    def write_csv(self, fh):
        writer = csv.writer(fh)
        writer.writerow(self.header())
        for e, (u, w, v), o, c in zip(self.eps, self.points, self.objective, self.residual):
            writer.writerow([repr(e), repr(o), repr(c)] + [repr(float(a)) for a in np.concatenate([u, w, v])])


@dataclass
class PathResult:
    trace: PathTrace
    final: RelaxedResult


def _run_path(mp, eps0, factor, eps_min, z):
    trace = PathTrace()
    k = 0
    res = None
    while True:
        eps = eps0 * factor ** k
        if eps <= eps_min * (1.0 + 1e-9):
            eps = eps_min
        res = solve_relaxed(mp, eps, z)
        trace.append(eps, res)
        z_new = _pack(mp, res.u, res.w, res.v)
        moved = np.max(np.abs(z_new - z), initial=0.0) if z is not None else math.inf
        z = z_new
        if eps <= eps_min or (moved < MOVE_TOL and res.residual <= eps_min):
            break
        k += 1
    return PathResult(trace, res)


def multistart_points(mp: Mpcc, rows: int = MULTISTART_ROWS) -> list:
    """Starts from pattern LPs over the most degenerate rows at the initial point."""
    z0 = initial_point(mp)
    _, _, p = mp.split(z0)
    score = p + mp.slack(z0)
    chosen = [int(i) for i in np.argsort(score, kind="stable")[:min(mp.r, rows)]]
    starts = [z0]
    for bits in itertools.product((0, 1), repeat=len(chosen)):
        active = [i for i, bit in zip(chosen, bits) if bit]
        zero = [i for i, bit in zip(chosen, bits) if not bit]
        out = _pattern_lp(mp, active, zero)
        if not out.optimal:
            continue
        try:
            z = start_from_leader(mp, mp.split(out.x)[0])
        except (LowerInfeasible, LowerUnbounded):
            continue
        if not any(np.allclose(z, s, atol=1e-12, rtol=0) for s in starts):
            starts.append(z)
    return starts


def regularization_path(mp: Mpcc, eps0: float = 1.0, factor: float = 0.1, eps_min: float = 1e-8,
                        start=None, multistart: bool = False) -> PathResult:
    """Follow local solutions of the relaxed problems for eps_k = eps0 * factor^k down to eps_min."""
    if not (eps0 > eps_min > 0 and 0 < factor < 1):
        raise ValueError("need eps0 > eps_min > 0 and factor in (0, 1)")
    if multistart:
        starts = multistart_points(mp)
    else:
        starts = [None if start is None else np.asarray(start, dtype=float)]
    best = None
    for z in starts:
        res = _run_path(mp, eps0, factor, eps_min, z)
        if best is None or res.final.objective < best.final.objective - 1e-12 * (1.0 + abs(res.final.objective)):
            best = res
    return best


# -- multiplier sets --------------------------------------------------------

def lambda_set_sample(mp: Mpcc, u, w, cap: int = 200_000) -> list:
    """Vertices of {v <= 0 | W^T v = t, v_i = 0 on rows inactive at (u, w)}."""
    gb = mp.gb
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    slack = gb.B @ u + gb.b - gb.W @ w
    act = np.nonzero(np.abs(slack) <= 1e-9 * (1.0 + np.abs(gb.b)))[0]
    M = gb.W[act].T  # l x |act|, M v_A = t
    t = gb.t
    if act.size == 0:
        return [np.zeros(mp.r)] if np.allclose(t, 0.0, atol=1e-12) else []
    rank = np.linalg.matrix_rank(M) if M.size else 0
    if math.comb(act.size, rank) > cap:
        raise CapExceeded("too many candidate multiplier bases")
    verts = []
    for S in itertools.combinations(range(act.size), rank):
        sub = M[:, S]
        if rank and np.linalg.matrix_rank(sub) < rank:
            continue
        vS = np.linalg.lstsq(sub, t, rcond=None)[0] if rank else np.zeros(0)
        vA = np.zeros(act.size)
        vA[list(S)] = vS
        if np.any(vA > 1e-9) or np.max(np.abs(M @ vA - t), initial=0.0) > 1e-9 * (1.0 + np.abs(t).max(initial=0.0)):
            continue
        v = np.zeros(mp.r)
        v[act] = np.minimum(vA, 0.0)
        if not any(np.allclose(v, o, atol=1e-10, rtol=0) for o in verts):
            verts.append(v)
    return verts
