"""Acceptance suite: one pass/fail line per criterion.

Run with pytest (lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""
import functools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bilevel_risk.detequiv import build_expectation, build_expected_excess, build_semideviation, solve_cvar
from bilevel_risk.errors import SolverError
from bilevel_risk.harness import (DistributionFamily, grid_minimize, grid_values, leader_grid, point_hits,
                                  stability_experiment)
from bilevel_risk.lowerlevel import enumerate_bases, f_eval, f_eval_basis, f_eval_basis_batch, membership_F
from bilevel_risk.model import CVaR, Expectation, ExpectedExcess, SemiDeviation
from bilevel_risk.mpcc import build_kkt, global_oracle, regularization_path
from bilevel_risk.risk import ScenarioProfile, cvar_breakpoint_min, eval_risk, grad_Q, risk_of, scenario_profile
from bilevel_risk.simplex import LpProblem, solve_lp
from instances import interval_instance, random_instance, scalar_bilevel

try:
    from conftest import CRITERIA_LINES
except ImportError:  # direct execution
    CRITERIA_LINES = {}

# tolerances
TOL_BASIS_REL = 1e-7
FD_STEP = 1e-6
TOL_GRAD_REL = 1e-4
GRID_RES = 1e-3
TOL_RISK_AT_X = 1e-7
TOL_PATH_LOW = 1e-7
PATH_SLACK = 0.10
TOL_G1 = 1e-6
TOL_CVAR_ETA = 1e-6
TOL_CVAR_SOLVE = 1e-4
TOL_AXIOM = 1e-12
TOL_CVAR_SHIFT = 1e-9
TOL_EXACT = 1e-9

N_POOL = 200
POINTS_PER_INSTANCE = 20
N_GRAD_POINTS = 100
N_SUITE = 50
N_PROFILES = 100
N_AXIOM_TRIALS = 1000
N_PAIRS = 1000

SOLVE_LOG = []  # (where, outcome) for every solve in the suite


def record(num: int, name: str, ok: bool, detail: str) -> bool:
    line = f"criterion {num} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    CRITERIA_LINES[num] = line
    print(line)
    return ok


def logged_solve(where, fn, *args, **kwargs):
    try:
        out = fn(*args, **kwargs)
    except SolverError as exc:
        SOLVE_LOG.append((where, type(exc).__name__))
        raise
    SOLVE_LOG.append((where, "optimal"))
    return out


# -- shared pools ---------------------------------------------------------------

def _vertices_of_F(inst, k, rng, count=6, box=2.0):
    """Leader points of {x in [-box, box]^n : lower level feasible at (x, z_k)} from random LPs."""
    n, m, s = inst.n, inst.m, inst.s
    G = np.vstack([np.hstack([-inst.T, inst.A]), np.hstack([np.eye(n), np.zeros((n, m))]),
                   np.hstack([-np.eye(n), np.zeros((n, m))])])
    g = np.concatenate([inst.Z[k], np.full(2 * n, box)])
    found = []
    for _ in range(count):
        direction = rng.normal(size=n)
        out = solve_lp(LpProblem(c=np.concatenate([direction, np.zeros(m)]), G=G, g=g))
        if out.optimal:
            found.append(out.x[:n])
    return found


def _points_in_F(inst, rng, count):
    pts = []
    for _ in range(400):
        if len(pts) == count:
            return pts
        x = rng.uniform(-2.0, 2.0, inst.n)
        k = int(rng.integers(inst.K))
        if membership_F(inst, x, inst.Z[k]):
            pts.append((x, k))
    # thin feasible sets: convex combinations of LP vertices stay inside
    for box in (2.0, 100.0, 1e4):
        verts = {k: _vertices_of_F(inst, k, rng, box=box) for k in range(inst.K)}
        ks = [k for k in verts if verts[k]]
        if ks:
            break
    else:
        return None  # no atom admits any leader point
    while len(pts) < count:
        k = ks[int(rng.integers(len(ks)))]
        V = np.array(verts[k])
        pts.append((rng.dirichlet(np.ones(len(V))) @ V, k))
    return pts


@functools.lru_cache(maxsize=None)
def basis_pool():
    rng = np.random.default_rng(1)
    pool = []
    while len(pool) < N_POOL:
        inst = random_instance(rng)
        pts = _points_in_F(inst, rng, POINTS_PER_INSTANCE)
        if pts is not None:
            pool.append((inst, enumerate_bases(inst), pts))
    return pool


def _suite_measures(inst, catalog, rng):
    vals = grid_values(inst, leader_grid(inst), catalog)
    rho = float(rng.uniform(0.0, 0.9))
    eta = float(rng.uniform(vals.min(), vals.max()))
    return ((Expectation(), build_expectation(inst)),
            (ExpectedExcess(eta), build_expected_excess(inst, eta)),
            (SemiDeviation(rho), build_semideviation(inst, rho)))


@functools.lru_cache(maxsize=None)
def reformulation_suite():
    """Oracle, grid and path results for E, EE and SD on small random instances."""
    rng = np.random.default_rng(4)
    rows = []
    for i in range(N_SUITE):
        inst = random_instance(rng, n_max=1, m_max=2, s_max=3, K_max=3, require_leader_feasible=True)
        catalog = enumerate_bases(inst)
        lip = catalog.lipschitz_bound(inst.c)
        for measure, gb in _suite_measures(inst, catalog, rng):
            mp = build_kkt(gb)
            oracle = logged_solve(f"suite {i} {measure} oracle", global_oracle, mp)
            gx, gv = grid_minimize(inst, measure, GRID_RES, catalog)
            path = logged_solve(f"suite {i} {measure} path", regularization_path, mp, 1.0, 0.1, 1e-8,
                                multistart=True)
            lq = lip * (1.0 + 2.0 * measure.rho) if isinstance(measure, SemiDeviation) else lip
            rows.append({
                "instance": i, "measure": measure, "oracle": oracle.objective, "x": oracle.u,
                "grid": gv, "bound": GRID_RES * lq,
                "risk_at_x": eval_risk(scenario_profile(inst, oracle.u), measure),
                "path": path.final.objective,
            })
    return rows


@functools.lru_cache(maxsize=None)
def counterexample_table():
    inst = interval_instance([1.0], [1.0])
    family = DistributionFamily.two_point([1.0, -1.0], [2, 10, 100])
    return logged_solve("counterexample", stability_experiment, inst, family, Expectation())


@functools.lru_cache(maxsize=None)
def cvar_runs():
    """(solve_cvar value, leader-grid CVaR minimum) on interval instances."""
    rng = np.random.default_rng(55)
    out = []
    for i in range(10):
        K = int(rng.integers(1, 5))
        inst = interval_instance(rng.uniform(-3.0, 3.0, K), rng.dirichlet(np.ones(K)))
        alpha = float(rng.uniform(0.1, 0.9))
        res = logged_solve(f"cvar {i}", solve_cvar, inst, alpha)
        out.append((res.value, grid_minimize(inst, CVaR(alpha), GRID_RES)[1]))
    return tuple(out)


@functools.lru_cache(maxsize=None)
def g1_path():
    return logged_solve("G1 path", regularization_path, build_kkt(scalar_bilevel()), 1.0, 0.1, 1e-8).final


# -- criteria -----------------------------------------------------------------------

def criterion_1():
    table = counterexample_table()
    member_err = max(abs(v - 1.0) for _, v, _ in table.rows)
    limit_err = abs(table.limit_value)
    ok = member_err <= TOL_EXACT and limit_err <= TOL_EXACT and table.verdict.startswith("gap")
    return record(1, "counterexample values", ok,
                  f"members {[float(v) for _, v, _ in table.rows]} (max err {member_err:.1e}), "
                  f"limit {table.limit_value:.3g} (err {limit_err:.1e}), verdict {table.verdict}")


def criterion_2():
    fails = points = 0
    worst = 0.0
    for inst, catalog, pts in basis_pool():
        for x, k in pts:
            a = f_eval(inst, x, k)[0]
            b = f_eval_basis(inst, catalog, x, k)
            err = abs(a - b) / max(1.0, abs(a))
            worst = max(worst, err)
            fails += err > TOL_BASIS_REL
            points += 1
    ok = fails == 0 and len(basis_pool()) >= N_POOL and points >= N_POOL * POINTS_PER_INSTANCE
    return record(2, "basis formula vs LP", ok,
                  f"{len(basis_pool())} instances, {points} points, {fails} failures, worst rel {worst:.1e}")


def _fd(inst, x, measure):
    out = np.empty(inst.n)
    for i, e in enumerate(np.eye(inst.n)):
        up = eval_risk(scenario_profile(inst, x + FD_STEP * e), measure)
        dn = eval_risk(scenario_profile(inst, x - FD_STEP * e), measure)
        out[i] = (up - dn) / (2 * FD_STEP)
    return out


def criterion_3():
    rng = np.random.default_rng(3)
    points = fails = hits = accepted = 0
    worst = 0.0
    while points < N_GRAD_POINTS:
        base = random_instance(rng, K_max=4)
        catalog = enumerate_bases(base)
        x = rng.uniform(0.1, 0.9, base.n)
        inst = base.with_scenarios(base.Z + rng.uniform(-0.1, 0.1, base.Z.shape), base.pi)
        if not all(membership_F(inst, x, z) for z in inst.Z):
            continue
        accepted += 1
        values = np.array([f_eval(inst, x, k)[0] for k in range(inst.K)])
        eta = float(rng.uniform(values.min() - 0.5, values.max() + 0.5))
        if point_hits(inst, catalog, x, inst.Z, eta):
            hits += 1
            continue
        prof = scenario_profile(inst, x, catalog)
        points += 1
        for measure in (Expectation(), ExpectedExcess(eta), SemiDeviation(float(rng.uniform(0.0, 0.99)))):
            g, flagged = grad_Q(inst, catalog, x, measure, prof)
            if not flagged:
                continue
            fd = _fd(inst, x, measure)
            err = np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1.0)
            worst = max(worst, err)
            fails += err > TOL_GRAD_REL
    frac = hits / accepted
    ok = fails == 0 and frac == 0.0
    return record(3, "gradients vs central differences", ok,
                  f"{points} points x 3 measures, hit fraction {frac:g}, {fails} failures, worst rel {worst:.1e}")


def criterion_4():
    rows = reformulation_suite()
    grid_fail = [r for r in rows if not (-TOL_EXACT <= r["grid"] - r["oracle"] <= r["bound"])]
    x_fail = [r for r in rows if abs(r["risk_at_x"] - r["oracle"]) > TOL_RISK_AT_X * (1.0 + abs(r["oracle"]))]
    n_inst = len({r["instance"] for r in rows})
    ok = not grid_fail and not x_fail and n_inst >= N_SUITE
    return record(4, "reformulation equivalence", ok,
                  f"{n_inst} instances, {len(rows)} builds, {len(grid_fail)} grid mismatches, "
                  f"{len(x_fail)} risk-at-x mismatches")


def criterion_5():
    rng = np.random.default_rng(5)
    fails = 0
    worst = 0.0
    for _ in range(N_PROFILES):
        K = int(rng.integers(1, 9))
        # values on the 1e-4 lattice so the eta grid passes through every breakpoint
        values = np.round(rng.uniform(-5.0, 5.0, K), 4)
        probs = rng.dirichlet(np.ones(K))
        alpha = float(rng.uniform(0.05, 0.95))
        _, val = cvar_breakpoint_min(ScenarioProfile.of(values, probs), alpha)
        lo, hi = int(round(values.min() * 1e4)), int(round(values.max() * 1e4))
        etas = np.arange(lo, hi + 1) * 1e-4
        excess = np.maximum(values[None, :] - etas[:, None], 0.0) @ probs
        grid = float(np.min(etas + excess / (1.0 - alpha)))
        worst = max(worst, abs(val - grid))
        fails += abs(val - grid) > TOL_CVAR_ETA
    gaps = [abs(a - b) for a, b in cvar_runs()]
    solve_worst = max(gaps)
    solve_fail = sum(g > TOL_CVAR_SOLVE for g in gaps)
    ok = fails == 0 and solve_fail == 0
    return record(5, "CVaR consistency", ok,
                  f"{N_PROFILES} profiles (worst {worst:.1e}, {fails} failures); "
                  f"10 solve_cvar runs (worst {solve_worst:.1e}, {solve_fail} failures)")


def criterion_6():
    res = g1_path()
    dist = float(max(np.max(np.abs(res.u)), np.max(np.abs(res.w))))
    g1_ok = dist <= TOL_G1 and abs(res.objective) <= TOL_G1
    rows = reformulation_suite()
    below = [r for r in rows if r["path"] < r["oracle"] - TOL_PATH_LOW]
    above = [r for r in rows if r["path"] > r["oracle"] + PATH_SLACK * abs(r["oracle"]) + TOL_PATH_LOW]
    local = [r for r in rows if r["path"] > r["oracle"] + TOL_PATH_LOW]
    ok = g1_ok and not below and not above
    return record(6, "regularization path", ok,
                  f"G1 distance {dist:.1e}, objective {res.objective:.1e}; suite {len(rows)} runs, "
                  f"{len(below)} below oracle, {len(above)} beyond 10%, {len(local)} flagged local minima")


def _measures(rng):
    return [Expectation(), ExpectedExcess(float(rng.uniform(-3, 3)), 1.0),
            ExpectedExcess(float(rng.uniform(-3, 3)), 2.0), SemiDeviation(float(rng.uniform(0, 1)), 1.0),
            SemiDeviation(float(rng.uniform(0, 1)), 2.0), CVaR(float(rng.uniform(0.0, 0.95)))]


def criterion_7():
    rng = np.random.default_rng(7)
    viol = {"monotone": 0, "convex": 0, "law": 0, "shift": 0}
    for _ in range(N_AXIOM_TRIALS):
        K = int(rng.integers(1, 8))
        probs = rng.dirichlet(np.ones(K))
        v = rng.uniform(-5.0, 5.0, K)
        w = v + rng.uniform(0.0, 2.0, K) * (rng.random(K) < 0.7)
        u = rng.uniform(-5.0, 5.0, K)
        lam = float(rng.random())
        mix = lam * v + (1.0 - lam) * u
        perm = rng.permutation(K)
        equal = np.full(K, 1.0 / K)
        for m in _measures(rng):
            viol["monotone"] += risk_of(w, probs, m) < risk_of(v, probs, m) - TOL_AXIOM
            rhs = lam * risk_of(v, probs, m) + (1.0 - lam) * risk_of(u, probs, m)
            viol["convex"] += risk_of(mix, probs, m) > rhs + TOL_AXIOM
            viol["law"] += abs(risk_of(v[perm], equal, m) - risk_of(v, equal, m)) > TOL_AXIOM
        a = float(rng.uniform(-10.0, 10.0))
        cv = CVaR(float(rng.uniform(0.0, 0.95)))
        viol["shift"] += abs(risk_of(v + a, probs, cv) - risk_of(v, probs, cv) - a) > TOL_CVAR_SHIFT
    ok = not any(viol.values())
    return record(7, "risk axioms", ok, f"{N_AXIOM_TRIALS} trials each, violations {viol}")


def criterion_8():
    rng = np.random.default_rng(8)
    viol = pairs = 0
    worst = 0.0
    for inst, catalog, pts in basis_pool():
        lip = catalog.lipschitz_bound(inst.c)
        X = [x for x, _ in pts]
        Zs = [inst.Z[k] for _, k in pts]
        for x, k in pts:
            for _ in range(5):
                X.append(x + rng.uniform(-0.5, 0.5, inst.n))
                Zs.append(inst.Z[k] + rng.uniform(-0.5, 0.5, inst.s))
        X, Zs = np.array(X), np.array(Zs)
        vals = f_eval_basis_batch(inst, catalog, X, Zs)
        ok_idx = np.nonzero(np.isfinite(vals))[0]
        i = rng.choice(ok_idx, N_PAIRS)
        j = rng.choice(ok_idx, N_PAIRS)
        dist = np.linalg.norm(np.hstack([X[i] - X[j], Zs[i] - Zs[j]]), axis=1)
        diff = np.abs(vals[i] - vals[j])
        excess = diff - lip * dist
        worst = max(worst, float(np.max(diff / np.maximum(lip * dist, 1e-300), where=dist > 0, initial=0.0)))
        viol += int(np.sum(excess > 1e-9 * (1.0 + np.abs(vals[i]))))
        pairs += N_PAIRS
    return record(8, "empirical Lipschitz bound", viol == 0,
                  f"{len(basis_pool())} instances, {pairs} pairs, {viol} violations, max ratio {worst:.3f}")


def criterion_9():
    # every solve of the suite goes through logged_solve; the caches make this idempotent
    counterexample_table()
    cvar_runs()
    g1_path()
    reformulation_suite()
    bad = [(w, o) for w, o in SOLVE_LOG if o != "optimal"]
    return record(9, "solvability", not bad, f"{len(SOLVE_LOG)} solves, {len(bad)} non-optimal {bad[:3]}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(criterion):
    assert criterion()


if __name__ == "__main__":
    start = time.time()
    results = [fn() for fn in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed in {time.time() - start:.1f}s")
    sys.exit(0 if all(results) else 1)
