"""Problem data, risk measure descriptors, and instance file I/O."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DimensionError, InstanceSyntaxError, MeasureError, ProbabilityError
from .simplex import LpProblem, solve_lp

PROB_RENORM_TOL = 1e-9
VERTEX_CAP = 5000

_KEYS = ("n", "m", "s", "K", "c", "q", "d", "A", "T", "H", "h", "scenarios", "sense")


def _frozen(a, shape=None):
    a = np.array(a, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Instance:
    """Bilevel stochastic linear program with a finite scenario list.

    The follower solves ``min d^T y s.t. A y <= T x + Z_k``; the leader pays
    ``c^T x + q^T y`` and picks ``x`` in ``{x | H x <= h}``.
    """

    c: np.ndarray
    q: np.ndarray
    d: np.ndarray
    A: np.ndarray
    T: np.ndarray
    H: np.ndarray
    h: np.ndarray
    Z: np.ndarray  # K x s, one scenario atom per row
    pi: np.ndarray
    sense: str = "optimistic"

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        q = np.asarray(self.q, dtype=float).ravel()
        d = np.asarray(self.d, dtype=float).ravel()
        n, m = c.size, q.size
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            raise DimensionError("A must be a matrix")
        s = A.shape[0]
        if n < 1 or m < 1 or s < 1:
            raise DimensionError(f"need n, m, s >= 1 (got n={n}, m={m}, s={s})")
        if A.shape != (s, m):
            raise DimensionError(f"A is {A.shape}, expected ({s}, {m})")
        if d.size != m:
            raise DimensionError(f"d has length {d.size}, expected {m}")
        T = np.asarray(self.T, dtype=float)
        if T.shape != (s, n):
            raise DimensionError(f"T is {T.shape}, expected ({s}, {n})")
        H = np.asarray(self.H, dtype=float).reshape(-1, n) if np.size(self.H) else np.zeros((0, n))
        h = np.asarray(self.h, dtype=float).ravel()
        if H.shape[0] != h.size:
            raise DimensionError(f"H has {H.shape[0]} rows but h has {h.size} entries")
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != s:
            raise DimensionError(f"scenario atoms must have length {s}")
        pi = np.asarray(self.pi, dtype=float).ravel()
        if Z.shape[0] < 1 or pi.size != Z.shape[0]:
            raise DimensionError("need K >= 1 scenarios with one probability each")
        if np.any(~np.isfinite(pi)) or np.any(pi <= 0) or np.any(pi > 1):
            raise ProbabilityError("scenario probabilities must lie in (0, 1]")
        total = math.fsum(pi)
        if abs(total - 1.0) > PROB_RENORM_TOL:
            raise ProbabilityError(f"scenario probabilities sum to {total!r}, not 1")
        pi = pi / total
        if self.sense not in ("optimistic", "pessimistic"):
            raise InstanceSyntaxError(f"unknown sense {self.sense!r}")
        for name, val in (("c", c), ("q", q), ("d", d), ("A", A), ("T", T), ("H", H), ("h", h), ("Z", Z)):
            if not np.all(np.isfinite(val)):
                raise InstanceSyntaxError(f"{name} contains non-finite entries")
        for name, val in (("c", c), ("q", q), ("d", d), ("A", A), ("T", T), ("H", H), ("h", h), ("Z", Z), ("pi", pi)):
            object.__setattr__(self, name, _frozen(val))

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.q.size

    @property
    def s(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.Z.shape[0]

    @property
    def pessimistic(self) -> bool:
        return self.sense == "pessimistic"

    def with_scenarios(self, Z, pi) -> "Instance":
        return Instance(self.c, self.q, self.d, self.A, self.T, self.H, self.h, Z, pi, self.sense)

    def with_sense(self, sense: str) -> "Instance":
        return Instance(self.c, self.q, self.d, self.A, self.T, self.H, self.h, self.Z, self.pi, sense)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "m": self.m, "s": self.s, "K": self.K,
            "c": self.c.tolist(), "q": self.q.tolist(), "d": self.d.tolist(),
            "A": self.A.tolist(), "T": self.T.tolist(),
            "H": self.H.tolist(), "h": self.h.tolist(),
            "scenarios": [{"z": z.tolist(), "pi": float(p)} for z, p in zip(self.Z, self.pi)],
            "sense": self.sense,
        }


def parse_instance(text: str) -> Instance:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceSyntaxError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InstanceSyntaxError("instance file must hold a JSON object")
    missing = [k for k in _KEYS if k not in data]
    if missing:
        raise InstanceSyntaxError(f"missing keys: {', '.join(missing)}")
    scen = data["scenarios"]
    if not isinstance(scen, list) or not all(isinstance(e, dict) and {"z", "pi"} <= e.keys() for e in scen):
        raise InstanceSyntaxError("scenarios must be a list of {z, pi} objects")

    def numeric(name, value, depth):
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError):
            raise InstanceSyntaxError(f"{name} must be numeric") from None
        if any(isinstance(v, (bool, str)) for v in np.ravel(np.array(value, dtype=object))):
            raise InstanceSyntaxError(f"{name} must be numeric")
        if depth == 2 and arr.size == 0:
            arr = arr.reshape(0, 0)
        if arr.ndim != depth:
            raise DimensionError(f"{name} must be a {'matrix' if depth == 2 else 'vector'}")
        return arr

    dims = {}
    for k in ("n", "m", "s", "K"):
        if not isinstance(data[k], int) or isinstance(data[k], bool):
            raise InstanceSyntaxError(f"{k} must be an integer")
        dims[k] = data[k]
    n, m, s, K = dims["n"], dims["m"], dims["s"], dims["K"]
    c = numeric("c", data["c"], 1)
    q = numeric("q", data["q"], 1)
    d = numeric("d", data["d"], 1)
    A = numeric("A", data["A"], 2)
    T = numeric("T", data["T"], 2)
    H = numeric("H", data["H"], 2)
    h = numeric("h", data["h"], 1)
    Z = [numeric("z", e["z"], 1) for e in scen]
    pi = [e["pi"] for e in scen]
    if not all(isinstance(p, (int, float)) and not isinstance(p, bool) for p in pi):
        raise InstanceSyntaxError("pi must be numeric")

    checks = [
        (c.size == n, f"c has length {c.size}, expected n={n}"),
        (q.size == m, f"q has length {q.size}, expected m={m}"),
        (d.size == m, f"d has length {d.size}, expected m={m}"),
        (A.shape == (s, m), f"A is {A.shape}, expected ({s}, {m})"),
        (T.shape == (s, n), f"T is {T.shape}, expected ({s}, {n})"),
        (H.size == 0 or H.shape[1] == n, f"H has {H.shape[1] if H.ndim == 2 else '?'} columns, expected n={n}"),
        (len(Z) == K, f"{len(Z)} scenarios listed, expected K={K}"),
        (all(z.size == s for z in Z), f"every z must have length s={s}"),
    ]
    for ok, msg in checks:
        if not ok:
            raise DimensionError(msg)
    return Instance(c, q, d, A, T, H.reshape(-1, n), h, np.array(Z).reshape(K, s), pi, data["sense"])


def serialize_instance(inst: Instance) -> str:
    return json.dumps(inst.to_dict())


def load_instance(path) -> Instance:
    with open(path) as fh:
        return parse_instance(fh.read())


# -- risk measures ---------------------------------------------------------

@dataclass(frozen=True)
class Expectation:
    def __str__(self):
        return "E"


@dataclass(frozen=True)
class ExpectedExcess:
    eta: float
    p: float = 1.0

    def __post_init__(self):
        if not self.p >= 1:
            raise MeasureError("expected excess order p must be >= 1")

    def __str__(self):
        return f"EE:eta={self.eta:g},p={self.p:g}"


@dataclass(frozen=True)
class SemiDeviation:
    rho: float
    p: float = 1.0

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise MeasureError("semideviation weight rho must lie in [0, 1)")
        if not self.p >= 1:
            raise MeasureError("semideviation order p must be >= 1")

    def __str__(self):
        return f"SD:rho={self.rho:g},p={self.p:g}"


@dataclass(frozen=True)
class CVaR:
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise MeasureError("CVaR level alpha must lie in (0, 1)")

    def __str__(self):
        return f"CVaR:alpha={self.alpha:g}"


RiskMeasure = Union[Expectation, ExpectedExcess, SemiDeviation, CVaR]


def parse_measure(spec: str) -> RiskMeasure:
    """Parse ``NAME[:key=val,...]``, e.g. ``EE:eta=2,p=1``."""
    name, _, rest = spec.strip().partition(":")
    params = {}
    if rest:
        for item in rest.split(","):
            key, sep, val = item.partition("=")
            if not sep:
                raise MeasureError(f"bad measure parameter {item!r}")
            try:
                params[key.strip()] = float(val)
            except ValueError:
                raise MeasureError(f"parameter {key!r} is not a number") from None
    allowed = {"E": set(), "EE": {"eta", "p"}, "SD": {"rho", "p"}, "CVaR": {"alpha"}}
    if name not in allowed:
        raise MeasureError(f"unknown measure {name!r}")
    extra = set(params) - allowed[name]
    if extra:
        raise MeasureError(f"unexpected parameters for {name}: {sorted(extra)}")
    try:
        if name == "E":
            return Expectation()
        if name == "EE":
            return ExpectedExcess(params["eta"], params.get("p", 1.0))
        if name == "SD":
            return SemiDeviation(params["rho"], params.get("p", 1.0))
        return CVaR(params["alpha"])
    except KeyError as exc:
        raise MeasureError(f"{name} requires parameter {exc.args[0]}") from None


# -- leader set ------------------------------------------------------------

def lower_feasible(A, rhs) -> bool:
    """Phase-1 check that {y | A y <= rhs} is nonempty."""
    A = np.asarray(A, dtype=float)
    out = solve_lp(LpProblem(c=np.zeros(A.shape[1]), G=A, g=rhs))
    return out.optimal


def leader_vertices(H, h, cap: int = VERTEX_CAP) -> list[np.ndarray]:
    """Vertices of {x | H x <= h} by active-set enumeration (None if too many)."""
    H = np.asarray(H, dtype=float)
    h = np.asarray(h, dtype=float)
    p, n = H.shape
    if p < n or math.comb(p, n) > cap:
        return None
    verts = []
    for rows in itertools.combinations(range(p), n):
        Hs = H[list(rows)]
        if abs(np.linalg.det(Hs)) < 1e-12:
            continue
        x = np.linalg.solve(Hs, h[list(rows)])
        if np.all(H @ x <= h + 1e-9 * (1 + np.abs(h))):
            if not any(np.allclose(x, v, atol=1e-12) for v in verts):
                verts.append(x)
    return verts


def leader_samples(inst: Instance, cap: int = VERTEX_CAP) -> list[np.ndarray]:
    """Vertices of X when enumerable, otherwise LP extreme points in fixed directions."""
    verts = leader_vertices(inst.H, inst.h, cap)
    if verts:
        return verts
    n = inst.n
    dirs = [v for i in range(n) for v in (np.eye(n)[i], -np.eye(n)[i])]
    rng = np.random.default_rng(0)
    dirs += list(rng.standard_normal((2 * n, n)))
    pts = []
    for dvec in dirs:
        out = solve_lp(LpProblem(c=dvec, G=inst.H, g=inst.h))
        if out.optimal and not any(np.allclose(out.x, v, atol=1e-12) for v in pts):
            pts.append(out.x)
    return pts


def validate_leader_in_FZ(inst: Instance) -> list[tuple[int, int]]:
    """Pairs (sample index, scenario index) whose lower level is infeasible.

    The samples are those returned by :func:`leader_samples`.
    """
    report = []
    for i, x in enumerate(leader_samples(inst)):
        base = inst.T @ x
        for k in range(inst.K):
            if not lower_feasible(inst.A, base + inst.Z[k]):
                report.append((i, k))
    return report


def leader_bounds(inst: Instance) -> np.ndarray | None:
    """Bounding box of X as an (n, 2) array, or None when X is unbounded."""
    box = np.zeros((inst.n, 2))
    for i in range(inst.n):
        for j, sign in enumerate((1.0, -1.0)):
            cvec = np.zeros(inst.n)
            cvec[i] = sign
            out = solve_lp(LpProblem(c=cvec, G=inst.H, g=inst.h))
            if not out.optimal:
                return None
            box[i, j] = out.x[i]
    return box
