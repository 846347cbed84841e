"""Risk functionals over discrete scenario profiles and their gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotDifferentiable, UnsupportedMeasure
from .lowerlevel import TOL_HYPER, BasisCatalog, f_eval, grad_f
from .model import CVaR, Expectation, ExpectedExcess, Instance, RiskMeasure, SemiDeviation
from .simplex import LpProblem, solve_lp

TOL_FEAS = 1e-9
CVAR_TIE = 1e-12


@dataclass(frozen=True)
class ScenarioProfile:
    """Values f(x, Z_k) with their probabilities.

    ``entries`` and ``grads`` are filled only when a basis catalog was supplied.
    """

    x: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    entries: tuple | None = None
    grads: np.ndarray | None = None  # K x n, c + delta of the attaining basis

    @classmethod
    def of(cls, values, probs) -> "ScenarioProfile":
        return cls(np.zeros(0), np.asarray(values, dtype=float), np.asarray(probs, dtype=float))

    @property
    def differentiable(self) -> bool:
        return self.entries is not None and all(e.differentiable for e in self.entries)


def scenario_profile(inst: Instance, x, catalog: BasisCatalog | None = None) -> ScenarioProfile:
    x = np.asarray(x, dtype=float)
    values = np.empty(inst.K)
    for k in range(inst.K):
        values[k], _ = f_eval(inst, x, k)
    if catalog is None:
        return ScenarioProfile(x, values, inst.pi.copy())
    entries, grads = [], np.empty((inst.K, inst.n))
    for k in range(inst.K):
        grads[k], entry, _ = grad_f(inst, catalog, x, k)
        entries.append(entry)
    return ScenarioProfile(x, values, inst.pi.copy(), tuple(entries), grads)


# -- evaluation ------------------------------------------------------------

def _expectation(values, probs) -> float:
    return math.fsum(p * v for p, v in zip(probs, values))


def _excess(values, probs, eta, p=1.0) -> float:
    if p == 1.0:
        return math.fsum(pr * max(v - eta, 0.0) for pr, v in zip(probs, values))
    return math.fsum(pr * max(v - eta, 0.0) ** p for pr, v in zip(probs, values)) ** (1.0 / p)


def cvar_breakpoint_min(profile: ScenarioProfile, alpha: float) -> tuple[float, float]:
    """Return (eta*, CVaR) by scanning the breakpoints of the minimization objective.

    Among minimizers the smallest eta is returned.
    """
    values, probs = profile.values, profile.probs
    scale = 1.0 / (1.0 - alpha)
    cands = np.unique(values)
    objs = [eta + scale * _excess(values, probs, eta) for eta in cands]
    best = min(objs)
    tie = CVAR_TIE * (1.0 + abs(best))
    eta = next(e for e, o in zip(cands, objs) if o <= best + tie)
    return float(eta), float(best)


def eval_risk(profile: ScenarioProfile, measure: RiskMeasure) -> float:
    v, pr = profile.values, profile.probs
    if isinstance(measure, Expectation):
        return _expectation(v, pr)
    if isinstance(measure, ExpectedExcess):
        return _excess(v, pr, measure.eta, measure.p)
    if isinstance(measure, SemiDeviation):
        mean = _expectation(v, pr)
        return mean + measure.rho * _excess(v, pr, mean, measure.p)
    if isinstance(measure, CVaR):
        return cvar_breakpoint_min(profile, measure.alpha)[1]
    raise UnsupportedMeasure(f"unknown measure {measure!r}")


def risk_of(values, probs, measure: RiskMeasure) -> float:
    return eval_risk(ScenarioProfile.of(values, probs), measure)


# -- gradients -------------------------------------------------------------

def _level_hit(inst, catalog, profile, eta) -> bool:
    """Whether some scenario sits on a level set {c^T x + lam (T x + z) = eta} with lam != 0."""
    for k in range(inst.K):
        if abs(profile.values[k] - eta) <= TOL_HYPER and np.any(np.abs(profile.grads[k]) > TOL_HYPER):
            return True
    nz = np.any(np.abs(catalog.lam) > TOL_HYPER, axis=1)
    if not nz.any():
        return False
    base = float(inst.c @ profile.x)
    rhs = profile.x @ inst.T.T + inst.Z  # K x s
    levels = base + rhs @ catalog.lam[nz].T
    return bool(np.any(np.abs(levels - eta) <= TOL_HYPER))


def _weighted(probs, grads, mask):
    return np.array([math.fsum(p * g[j] for p, g, keep in zip(probs, grads, mask) if keep)
                     for j in range(grads.shape[1])])


def grad_Q(inst: Instance, catalog: BasisCatalog, x, measure: RiskMeasure, profile=None):
    """Return (gradient, differentiable) for E, EE (p = 1) and SD (p = 1)."""
    if isinstance(measure, CVaR) or getattr(measure, "p", 1.0) != 1.0:
        raise UnsupportedMeasure(f"no closed-form gradient for {measure}")
    prof = profile if profile is not None else scenario_profile(inst, x, catalog)
    probs, grads, vals = prof.probs, prof.grads, prof.values
    every = np.ones(inst.K, dtype=bool)
    g_mean = _weighted(probs, grads, every)
    diff = prof.differentiable
    if isinstance(measure, Expectation):
        return g_mean, diff
    if isinstance(measure, ExpectedExcess):
        eta = measure.eta
        g = _weighted(probs, grads, vals >= eta - TOL_HYPER)
        return g, diff and not _level_hit(inst, catalog, prof, eta)
    mean = _expectation(vals, probs)
    tail = vals >= mean - TOL_HYPER
    g = g_mean + measure.rho * _weighted(probs, grads - g_mean, tail)
    # max(f_k - mean, 0) kinks only where f_k meets the mean with a different slope
    at_mean = np.abs(vals - mean) <= TOL_HYPER
    kink = np.any(at_mean & np.any(np.abs(grads - g_mean) > TOL_HYPER, axis=1))
    ok = diff and abs(mean) > TOL_HYPER and not kink
    return g, ok


@dataclass(frozen=True)
class StationarityReport:
    necessary_cond_holds: bool
    interior_excluded: bool
    differentiable: bool
    gradient: np.ndarray


def hull_contains(points, target) -> bool:
    """Whether ``target`` lies in the convex hull of the rows of ``points``."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    nP = P.shape[0]
    E = np.vstack([P.T, np.ones((1, nP))])
    e = np.concatenate([target, [1.0]])
    out = solve_lp(LpProblem(c=np.zeros(nP), E=E, e=e, lb=np.zeros(nP)))
    return out.optimal


def stationarity_check(inst: Instance, catalog: BasisCatalog, x, strict: bool = True) -> StationarityReport:
    """First-order check for the expectation model at ``x``.

    With ``strict`` a nondifferentiable point raises; otherwise the attaining
    gradients are used and the report says the point is nondifferentiable.
    """
    x = np.asarray(x, dtype=float)
    g, diff = grad_Q(inst, catalog, x, Expectation())
    if strict and not diff:
        raise NotDifferentiable("expectation model is not differentiable at this point")
    active = inst.H @ x >= inst.h - TOL_FEAS * (1.0 + np.abs(inst.h))
    n = inst.n
    G = np.vstack([inst.H[active], np.eye(n), -np.eye(n)])
    rhs = np.concatenate([np.zeros(int(active.sum())), np.ones(2 * n)])
    out = solve_lp(LpProblem(c=g, G=G, g=rhs))
    necessary = out.value >= -TOL_FEAS
    excluded = not hull_contains(catalog.D, -inst.c)
    return StationarityReport(bool(necessary), bool(excluded), bool(diff), g)
