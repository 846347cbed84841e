"""Deterministic bilevel linear programs equivalent to the risk-averse models.

Every builder returns a :class:`GenericBilevel`

    min_u  g^T u + h^T w   s.t.  u in U = {H_u u <= h_u},
           w in Argmin_w { t^T w | W w <= B u + b }

whose coordinates are labelled so that solutions can be mapped back to the
leader decision ``x``, the scenario responses ``y_k`` and the auxiliary
excess variables ``v_k``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LowerInfeasible, LowerUnbounded, SenseError
from .model import CVaR, Instance, leader_samples
from .simplex import Status, solve_over_argmin

GOLDEN_TOL = 1e-6
CVAR_MAX_ROUNDS = 50


@dataclass(frozen=True)
class GenericBilevel:
    g: np.ndarray
    h: np.ndarray
    t: np.ndarray
    W: np.ndarray
    B: np.ndarray
    b: np.ndarray
    Hu: np.ndarray
    hu: np.ndarray
    u_names: tuple = ()
    w_names: tuple = ()
    row_scenario: tuple = ()  # scenario index of each lower row, -1 for coupling rows

    def __post_init__(self):
        for name in ("g", "h", "t", "b", "hu"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        k, l = self.g.size, self.h.size
        W = np.asarray(self.W, dtype=float).reshape(-1, l)
        B = np.asarray(self.B, dtype=float).reshape(-1, k)
        Hu = np.asarray(self.Hu, dtype=float).reshape(-1, k)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Hu", Hu)
        r = W.shape[0]
        if r == 0:
            raise DimensionError("lower level needs at least one constraint row")
        if self.t.size != l or B.shape[0] != r or self.b.size != r or Hu.shape[0] != self.hu.size:
            raise DimensionError("inconsistent GenericBilevel dimensions")
        if not self.u_names:
            object.__setattr__(self, "u_names", tuple(f"u[{i}]" for i in range(k)))
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w[{j}]" for j in range(l)))
        if not self.row_scenario:
            object.__setattr__(self, "row_scenario", tuple([-1] * r))
        if len(self.u_names) != k or len(self.w_names) != l or len(self.row_scenario) != r:
            raise DimensionError("provenance does not cover every coordinate")

    @property
    def k(self) -> int:
        return self.g.size

    @property
    def l(self) -> int:
        return self.h.size

    @property
    def r(self) -> int:
        return self.W.shape[0]

    def lower_response(self, u):
        """Optimistic lower-level response at ``u``: (w, multipliers v <= 0)."""
        rhs = self.B @ np.asarray(u, dtype=float) + self.b
        out = solve_over_argmin(self.t, self.h, self.W, rhs, "min")
        if out.status is Status.INFEASIBLE:
            raise LowerInfeasible("lower level infeasible at this leader point")
        if out.status is Status.UNBOUNDED:
            raise LowerUnbounded("lower level unbounded at this leader point")
        return out.x, out.duals_ineq

    def evaluate(self, u) -> float:
        """g^T u + min { h^T w | w in Psi(u) }."""
        w, _ = self.lower_response(u)
        return float(self.g @ np.asarray(u, dtype=float) + self.h @ w)

    def to_dict(self) -> dict:
        return {
            "g": self.g.tolist(), "h": self.h.tolist(), "t": self.t.tolist(),
            "W": self.W.tolist(), "B": self.B.tolist(), "b": self.b.tolist(),
            "Hu": self.Hu.tolist(), "hu": self.hu.tolist(),
            "provenance": {"u": list(self.u_names), "w": list(self.w_names), "rows": list(self.row_scenario)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "GenericBilevel":
        prov = data.get("provenance", {})
        return cls(data["g"], data["h"], data["t"], data["W"], data["B"], data["b"],
                   data["Hu"], data["hu"], tuple(prov.get("u", ())), tuple(prov.get("w", ())),
                   tuple(prov.get("rows", ())))


def _require_optimistic(inst: Instance):
    if inst.pessimistic:
        raise SenseError("deterministic equivalents are available for the optimistic model only")


def _y_names(inst):
    return [f"y[{k}][{j}]" for k in range(inst.K) for j in range(inst.m)]


def _x_names(inst):
    return tuple(f"x[{i}]" for i in range(inst.n))


def _scenario_blocks(inst):
    """Rows A y_k <= T x + Z_k for every k, as (W, B, b) over w = (y_1..y_K)."""
    K, s, m = inst.K, inst.s, inst.m
    W = np.kron(np.eye(K), inst.A)
    B = np.tile(inst.T, (K, 1))
    b = inst.Z.reshape(K * s)
    rows = [k for k in range(K) for _ in range(s)]
    return W, B, b, rows


def build_expectation(inst: Instance) -> GenericBilevel:
    _require_optimistic(inst)
    W, B, b, rows = _scenario_blocks(inst)
    h = np.concatenate([p * inst.q for p in inst.pi])
    t = np.tile(inst.d, inst.K)
    return GenericBilevel(inst.c, h, t, W, B, b, inst.H, inst.h, _x_names(inst), tuple(_y_names(inst)), tuple(rows))


def _with_excess_rows(inst, Wy, By, by, rows, cost_row_B, cost_row_b, coupling):
    """Append v-columns plus the excess rows shared by the EE and SD builds."""
    K, m = inst.K, inst.m
    ny = K * m
    Qblock = np.kron(np.eye(K), inst.q.reshape(1, m))  # row k picks q^T y_k
    W_top = np.hstack([Wy, np.zeros((Wy.shape[0], K))])
    W_exc = np.hstack([Qblock, -np.eye(K)])
    blocks_W, blocks_B, blocks_b, all_rows = [W_top, W_exc], [By, cost_row_B], [by, cost_row_b], rows + list(range(K))
    if coupling is not None:
        cW, cB, cb, crow = coupling
        blocks_W.insert(1, cW)
        blocks_B.insert(1, cB)
        blocks_b.insert(1, cb)
        all_rows = rows + crow + list(range(K))
    W = np.vstack(blocks_W)
    B = np.vstack(blocks_B)
    b = np.concatenate(blocks_b)
    return W, B, b, all_rows, ny


def build_expected_excess(inst: Instance, eta: float) -> GenericBilevel:
    """Leader pays sum_k pi_k v_k with v_k >= max(0, c^T x + q^T y_k - eta)."""
    _require_optimistic(inst)
    K, n = inst.K, inst.n
    Wy, By, by, rows = _scenario_blocks(inst)
    ny = K * inst.m
    nonneg = (np.hstack([np.zeros((K, ny)), -np.eye(K)]), np.zeros((K, n)), np.zeros(K), list(range(K)))
    W, B, b, all_rows, _ = _with_excess_rows(
        inst, Wy, By, by, rows, np.tile(-inst.c, (K, 1)), np.full(K, float(eta)), nonneg)
    t = np.concatenate([np.tile(inst.d, K), np.zeros(K)])
    h = np.concatenate([np.zeros(ny), inst.pi])
    names = tuple(_y_names(inst) + [f"v[{k}]" for k in range(K)])
    return GenericBilevel(np.zeros(n), h, t, W, B, b, inst.H, inst.h, _x_names(inst), names, tuple(all_rows))


def build_semideviation(inst: Instance, rho: float) -> GenericBilevel:
    """Leader pays c^T x + (1 - rho) E[q^T y] + rho E[v] with v_k >= max(q^T y_k, E[q^T y])."""
    _require_optimistic(inst)
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    K, n, m = inst.K, inst.n, inst.m
    Wy, By, by, rows = _scenario_blocks(inst)
    ny = K * m
    mean_row = np.concatenate([p * inst.q for p in inst.pi])
    coupling = (np.hstack([np.tile(mean_row, (K, 1)), -np.eye(K)]), np.zeros((K, n)), np.zeros(K), [-1] * K)
    W, B, b, all_rows, _ = _with_excess_rows(inst, Wy, By, by, rows, np.zeros((K, n)), np.zeros(K), coupling)
    t = np.concatenate([np.tile(inst.d, K), np.zeros(K)])
    h = np.concatenate([(1.0 - rho) * mean_row, rho * inst.pi])
    names = tuple(_y_names(inst) + [f"v[{k}]" for k in range(K)])
    return GenericBilevel(inst.c, h, t, W, B, b, inst.H, inst.h, _x_names(inst), names, tuple(all_rows))


def build_cvar_joint(inst: Instance, alpha: float) -> GenericBilevel:
    """CVaR model with the threshold eta as an extra free leader variable."""
    _require_optimistic(inst)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    K, n = inst.K, inst.n
    Wy, By, by, rows = _scenario_blocks(inst)
    ny = K * inst.m
    By = np.hstack([By, np.zeros((By.shape[0], 1))])
    nonneg = (np.hstack([np.zeros((K, ny)), -np.eye(K)]), np.zeros((K, n + 1)), np.zeros(K), list(range(K)))
    excess_B = np.hstack([np.tile(-inst.c, (K, 1)), np.ones((K, 1))])
    W, B, b, all_rows, _ = _with_excess_rows(inst, Wy, By, by, rows, excess_B, np.zeros(K), nonneg)
    t = np.concatenate([np.tile(inst.d, K), np.zeros(K)])
    h = np.concatenate([np.zeros(ny), inst.pi / (1.0 - alpha)])
    g = np.concatenate([np.zeros(n), [1.0]])
    Hu = np.hstack([inst.H, np.zeros((inst.H.shape[0], 1))])
    names = tuple(_y_names(inst) + [f"v[{k}]" for k in range(K)])
    return GenericBilevel(g, h, t, W, B, b, Hu, inst.h, _x_names(inst) + ("eta",), names, tuple(all_rows))


def extract(gb: GenericBilevel, u, w) -> dict:
    """Group a solution by provenance: {'x': ..., 'y': [y_k], 'v': [v_k], 'eta': ...}."""
    out: dict = {"x": [], "y": {}, "v": {}}
    for name, val in zip(gb.u_names, u):
        if name == "eta":
            out["eta"] = float(val)
        else:
            out["x"].append(float(val))
    for name, val in zip(gb.w_names, w):
        if name.startswith("y["):
            k = int(name[2:name.index("]")])
            out["y"].setdefault(k, []).append(float(val))
        elif name.startswith("v["):
            out["v"][int(name[2:-1])] = float(val)
    out["x"] = np.array(out["x"])
    out["y"] = [np.array(out["y"][k]) for k in sorted(out["y"])]
    out["v"] = np.array([out["v"][k] for k in sorted(out["v"])])
    return out


# -- CVaR ------------------------------------------------------------------

@dataclass
class CvarResult:
    x: np.ndarray
    eta: float
    value: float
    evaluations: dict = field(default_factory=dict)  # eta -> inner objective


def _default_inner(gb: GenericBilevel):
    from .mpcc import build_kkt, global_oracle

    res = global_oracle(build_kkt(gb))
    return res.u, res.objective


def solve_cvar(inst: Instance, alpha: float, inner=None) -> CvarResult:
    """Minimize CVaR over the leader set by a one-dimensional search on eta.

    ``inner(gb)`` must return (u, objective) for an expected-excess build; it
    defaults to the exact complementarity-pattern oracle.
    """
    from .risk import cvar_breakpoint_min, eval_risk, scenario_profile

    _require_optimistic(inst)
    measure = CVaR(alpha)
    inner = inner or _default_inner
    scale = 1.0 / (1.0 - alpha)
    evals: dict[float, float] = {}
    leaders: dict[float, np.ndarray] = {}
    seen_x: list[np.ndarray] = []

    def add_x(x):
        if not any(np.allclose(x, s, atol=1e-12, rtol=0) for s in seen_x):
            seen_x.append(np.asarray(x, dtype=float))
            return scenario_profile(inst, x).values
        return np.zeros(0)

    def phi(eta):
        eta = float(eta)
        if eta not in evals:
            u, obj = inner(build_expected_excess(inst, eta))
            evals[eta] = eta + scale * obj
            leaders[eta] = np.asarray(u, dtype=float)
        return evals[eta]

    pending = set()
    for x in leader_samples(inst):
        pending.update(add_x(x).tolist())
    for _ in range(CVAR_MAX_ROUNDS):
        fresh = sorted(e for e in pending if e not in evals)
        pending = set()
        if not fresh:
            break
        for eta in fresh:
            phi(eta)
            pending.update(add_x(leaders[eta]).tolist())

    # golden-section refinement between the neighbours of the best breakpoint
    etas = sorted(evals)
    best = min(etas, key=lambda e: (evals[e], e))
    i = etas.index(best)
    for lo, hi in ((etas[max(i - 1, 0)], best), (best, etas[min(i + 1, len(etas) - 1)])):
        ratio = (math.sqrt(5.0) - 1.0) / 2.0
        a, c = lo, hi
        while c - a > GOLDEN_TOL:
            x1 = c - ratio * (c - a)
            x2 = a + ratio * (c - a)
            if phi(x1) <= phi(x2):
                c = x2
            else:
                a = x1

    best_x, best_val = None, math.inf
    for x in [leaders[e] for e in sorted(leaders)] + seen_x:
        val = eval_risk(scenario_profile(inst, x), measure)
        if val < best_val - 1e-12 * (1.0 + abs(val)):
            best_x, best_val = x, val
    eta_star, _ = cvar_breakpoint_min(scenario_profile(inst, best_x), alpha)
    return CvarResult(best_x, eta_star, best_val, evals)
