"""Solving front end, leader-grid search and distribution-perturbation experiments."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .detequiv import build_expectation, build_expected_excess, build_semideviation, solve_cvar
from .errors import CapExceeded, InputError
from .lowerlevel import TOL_HYPER, BasisCatalog, diff_entry, enumerate_bases, f_eval, f_eval_basis_batch, slater_margin
from .model import CVaR, Expectation, ExpectedExcess, Instance, RiskMeasure, SemiDeviation, leader_bounds
from .mpcc import build_kkt, global_oracle, regularization_path
from .risk import eval_risk, risk_of, scenario_profile

GRID_RES = 1e-3
GRID_MAX_DIM = 3
GRID_POINT_CAP = 2_000_000
GRID_CHUNK = 20_000
NOISE = 0.1


# -- solving -----------------------------------------------------------------

@dataclass
class SolveResult:
    x: np.ndarray
    value: float
    method: str
    risk_at_x: float
    info: dict = field(default_factory=dict)


def build_for(inst: Instance, measure: RiskMeasure):
    if isinstance(measure, Expectation):
        return build_expectation(inst)
    if isinstance(measure, ExpectedExcess) and measure.p == 1.0:
        return build_expected_excess(inst, measure.eta)
    if isinstance(measure, SemiDeviation) and measure.p == 1.0:
        return build_semideviation(inst, measure.rho)
    raise InputError(f"no deterministic equivalent for {measure}; use the grid method")


def solve(inst: Instance, measure: RiskMeasure, method: str = "oracle", *, eps0=1.0, factor=0.1,
          eps_min=1e-8, pattern_cap=20, grid_res=GRID_RES, multistart=False) -> SolveResult:
    """Minimize the risk of f(x, Z) over the leader set with the chosen method."""
    if method == "grid" or inst.pessimistic:
        x, val = grid_minimize(inst, measure, grid_res)
        return SolveResult(x, val, "grid", val)
    if isinstance(measure, CVaR):
        if method == "path":
            def inner(gb):
                res = regularization_path(build_kkt(gb), eps0, factor, eps_min, multistart=multistart).final
                return res.u, res.objective
        else:
            def inner(gb):
                res = global_oracle(build_kkt(gb), pattern_cap)
                return res.u, res.objective
        res = solve_cvar(inst, measure.alpha, inner)
        return SolveResult(res.x, res.value, method, res.value, {"eta": res.eta})
    mp = build_kkt(build_for(inst, measure))
    if method == "oracle":
        out = global_oracle(mp, pattern_cap)
        x, val, info = out.u, out.objective, {"nodes": out.nodes}
    elif method == "path":
        pr = regularization_path(mp, eps0, factor, eps_min, multistart=multistart)
        x, val = pr.final.u, pr.final.objective
        info = {"steps": len(pr.trace), "kkt": pr.final.kkt, "residual": pr.final.residual}
    else:
        raise InputError(f"unknown method {method!r}")
    return SolveResult(x, val, method, eval_risk(scenario_profile(inst, x), measure), info)


# -- leader grid -------------------------------------------------------------

def risk_rows(values: np.ndarray, probs: np.ndarray, measure: RiskMeasure) -> np.ndarray:
    """Vectorized risk of every row of an (N, K) value matrix (plain floating sums)."""
    if isinstance(measure, Expectation):
        return values @ probs
    if isinstance(measure, ExpectedExcess):
        return (np.maximum(values - measure.eta, 0.0) ** measure.p @ probs) ** (1.0 / measure.p)
    if isinstance(measure, SemiDeviation):
        mean = values @ probs
        exc = (np.maximum(values - mean[:, None], 0.0) ** measure.p @ probs) ** (1.0 / measure.p)
        return mean + measure.rho * exc
    scale = 1.0 / (1.0 - measure.alpha)
    best = np.full(values.shape[0], np.inf)
    for k in range(values.shape[1]):
        eta = values[:, k:k + 1]
        best = np.minimum(best, eta[:, 0] + scale * (np.maximum(values - eta, 0.0) @ probs))
    return best


def leader_grid(inst: Instance, res: float = GRID_RES):
    """Grid points of step ``res`` over the bounding box of X that satisfy H x <= h."""
    if inst.n > GRID_MAX_DIM:
        raise CapExceeded(f"grid search is limited to n <= {GRID_MAX_DIM}")
    box = leader_bounds(inst)
    if box is None:
        raise InputError("grid search needs a bounded leader set")
    axes = []
    for lo, hi in box:
        npts = int(math.floor((hi - lo) / res + 1e-9)) + 1
        ax = lo + res * np.arange(npts)
        if hi - ax[-1] > 1e-12:
            ax = np.append(ax, hi)
        axes.append(ax)
    total = math.prod(len(a) for a in axes)
    if total > GRID_POINT_CAP:
        raise CapExceeded(f"{total} grid points exceed the cap {GRID_POINT_CAP}")
    pts = np.array(list(itertools.product(*axes))) if inst.n > 1 else axes[0][:, None]
    ok = np.all(pts @ inst.H.T <= inst.h + 1e-9 * (1.0 + np.abs(inst.h)), axis=1)
    return pts[ok]


def grid_values(inst: Instance, pts: np.ndarray, catalog: BasisCatalog | None = None) -> np.ndarray:
    """f(x, Z_k) for every grid point (rows) and scenario (columns); NaN outside F."""
    if catalog is None:
        try:
            catalog = enumerate_bases(inst)
        except CapExceeded:
            catalog = None
    out = np.empty((pts.shape[0], inst.K))
    if catalog is None:
        for i, x in enumerate(pts):
            for k in range(inst.K):
                try:
                    out[i, k] = f_eval(inst, x, k)[0]
                except Exception:
                    out[i, k] = np.nan
        return out
    for start in range(0, pts.shape[0], GRID_CHUNK):
        chunk = pts[start:start + GRID_CHUNK]
        for k in range(inst.K):
            out[start:start + GRID_CHUNK, k] = f_eval_basis_batch(inst, catalog, chunk, np.tile(inst.Z[k], (chunk.shape[0], 1)))
    return out


def grid_minimize(inst: Instance, measure: RiskMeasure, res: float = GRID_RES, catalog=None):
    """Best grid point and its exactly evaluated risk."""
    pts = leader_grid(inst, res)
    vals = grid_values(inst, pts, catalog)
    ok = ~np.isnan(vals).any(axis=1)
    if not ok.any():
        raise InputError("no grid point is feasible for every scenario")
    risks = np.where(ok, risk_rows(np.nan_to_num(vals), inst.pi, measure), np.inf)
    i = int(np.argmin(risks))
    return pts[i], float(risk_of(vals[i], inst.pi, measure))


@dataclass(frozen=True)
class LocalArgmin:
    """Grid argmin of the risk inside an l-infinity ball around a candidate point.

    ``strictly_inside`` says whether every near-minimal grid point stays at least
    one grid step away from the ball boundary.  A diagnostic only: it does not
    certify that the localized argmin is a complete local minimizing set.
    """

    center: np.ndarray
    radius: float
    value: float
    argmin: np.ndarray
    strictly_inside: bool


def local_argmin(inst: Instance, measure: RiskMeasure, x, radius: float = 0.1, res: float = 1e-2,
                 atol: float = 1e-9, catalog=None) -> LocalArgmin:
    x = np.asarray(x, dtype=float)
    if inst.n > GRID_MAX_DIM:
        raise CapExceeded(f"local grid is limited to n <= {GRID_MAX_DIM}")
    box = leader_bounds(inst)
    axes = []
    for i in range(inst.n):
        lo, hi = x[i] - radius, x[i] + radius
        if box is not None:
            lo, hi = max(lo, box[i, 0]), min(hi, box[i, 1])
        axes.append(np.unique(np.clip(x[i] + res * np.arange(-math.ceil(radius / res), math.ceil(radius / res) + 1),
                                      lo, hi)))
    pts = np.array(list(itertools.product(*axes)))
    pts = pts[np.all(pts @ inst.H.T <= inst.h + 1e-9 * (1.0 + np.abs(inst.h)), axis=1)]
    vals = grid_values(inst, pts, catalog)
    ok = ~np.isnan(vals).any(axis=1)
    if not ok.any():
        raise InputError("no local grid point is feasible for every scenario")
    risks = np.where(ok, risk_rows(np.nan_to_num(vals), inst.pi, measure), np.inf)
    best = float(risks.min())
    near = pts[risks <= best + atol * (1.0 + abs(best))]
    dist = np.max(np.abs(near - x), axis=1)
    return LocalArgmin(x, radius, best, near, bool(np.all(dist <= radius - res + 1e-12)))


# -- stability experiments -----------------------------------------------------

@dataclass(frozen=True)
class DistributionFamily:
    """Members (label, atoms K x s, weights) plus an optional declared weak limit."""

    members: tuple
    limit: tuple | None = None

    def __post_init__(self):
        for _, Z, pi in self.members + ((("limit",) + self.limit,) if self.limit else ()):
            pi = np.asarray(pi, dtype=float)
            if np.any(pi < 0) or abs(math.fsum(pi) - 1.0) > 1e-9:
                raise InputError("family member weights must form a probability vector")
            if np.asarray(Z).shape[0] != pi.size:
                raise InputError("one weight per atom required")

    @staticmethod
    def two_point(direction, levels, support_cap=None) -> "DistributionFamily":
        """mu_l = (1 - 1/l) delta_0 + (1/l) delta_{a_l * direction}, a_l = min(l, cap); limit delta_0."""
        direction = np.asarray(direction, dtype=float)
        members = []
        for l in levels:
            a = l if support_cap is None else min(l, support_cap)
            members.append((l, np.array([np.zeros_like(direction), a * direction]), np.array([1.0 - 1.0 / l, 1.0 / l])))
        return DistributionFamily(tuple(members), (np.zeros((1, direction.size)), np.array([1.0])))

    @staticmethod
    def constant(Z, pi, levels) -> "DistributionFamily":
        Z = np.asarray(Z, dtype=float)
        pi = np.asarray(pi, dtype=float)
        return DistributionFamily(tuple((l, Z, pi) for l in levels), (Z, pi))


def _member_instance(inst: Instance, Z, pi) -> Instance:
    Z = np.asarray(Z, dtype=float)
    pi = np.asarray(pi, dtype=float)
    keep = pi > 0  # zero-weight atoms carry no information
    return inst.with_scenarios(Z[keep], pi[keep])


def verdict(values, limit_value, atol=1e-9) -> str:
    gaps = [abs(v - limit_value) for v in values]
    if not gaps or gaps[-1] <= atol:
        return "converges"
    if all(b <= a + atol for a, b in zip(gaps, gaps[1:])) and gaps[-1] <= 0.1 * gaps[0]:
        return "converges"
    return f"gap({limit_value:g},{values[-1]:g})"


@dataclass
class StabilityTable:
    rows: list  # (label, value, argmin x)
    limit_value: float | None
    limit_argmin: np.ndarray | None
    verdict: str

    def write_csv(self, fh):
        writer = csv.writer(fh)
        writer.writerow(["l", "value", "argmin_sample", "verdict"])
        for label, val, x in self.rows:
            writer.writerow([label, repr(val), " ".join(repr(float(a)) for a in x), self.verdict])
        if self.limit_value is not None:
            writer.writerow(["limit", repr(self.limit_value),
                             " ".join(repr(float(a)) for a in self.limit_argmin), self.verdict])

    def summary(self) -> str:
        lines = [f"l={label}: value={val:.12g}" for label, val, _ in self.rows]
        if self.limit_value is not None:
            lines.append(f"limit: value={self.limit_value:.12g}")
        lines.append(f"verdict: {self.verdict}")
        return "\n".join(lines)


def stability_experiment(inst: Instance, family: DistributionFamily, measure: RiskMeasure,
                         method: str = "oracle", **options) -> StabilityTable:
    """Optimal value and a minimizer for every family member and for the declared limit."""
    rows = []
    for label, Z, pi in family.members:
        res = solve(_member_instance(inst, Z, pi), measure, method, **options)
        rows.append((label, res.value, res.x))
    limit_value = limit_x = None
    if family.limit is not None:
        res = solve(_member_instance(inst, *family.limit), measure, method, **options)
        limit_value, limit_x = res.value, res.x
        v = verdict([r[1] for r in rows], limit_value)
    else:
        v = "converges" if len(rows) < 2 else verdict([r[1] for r in rows[:-1]], rows[-1][1])
    return StabilityTable(rows, limit_value, limit_x, v)


# -- genericity ---------------------------------------------------------------

@dataclass(frozen=True)
class GenericityResult:
    fraction: float
    hits: int
    accepted: int
    rejected: int
    noise: float


def point_hits(inst: Instance, catalog: BasisCatalog, x, Z, eta=None) -> bool:
    """Whether any atom of ``Z`` lies on a nondifferentiability set at ``x``."""
    x = np.asarray(x, dtype=float)
    for z in Z:
        if not diff_entry(inst, catalog, x, z).differentiable:
            return True
        if eta is not None:
            rhs = inst.T @ x + z
            levels = float(inst.c @ x) + catalog.lam @ rhs
            nz = np.any(np.abs(catalog.lam) > TOL_HYPER, axis=1)
            if np.any(np.abs(levels[nz] - eta) <= TOL_HYPER):
                return True
    return False


def genericity_sample(inst: Instance, x, trials: int = 1000, seed: int = 0, noise: float = NOISE,
                      eta: float | None = None, catalog: BasisCatalog | None = None) -> GenericityResult:
    """Fraction of uniformly perturbed scenario sets that hit a nondifferentiability set.

    Draws that leave F for some atom are rejected and counted separately.
    """
    catalog = catalog or enumerate_bases(inst)
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    hits = accepted = rejected = 0
    for _ in range(trials):
        Z = inst.Z + rng.uniform(-noise, noise, size=inst.Z.shape)
        if any(slater_margin(inst.A, inst.T @ x + z) < -TOL_HYPER for z in Z):
            rejected += 1
            continue
        accepted += 1
        hits += point_hits(inst, catalog, x, Z, eta)
    frac = hits / accepted if accepted else float("nan")
    return GenericityResult(frac, hits, accepted, rejected, noise)
