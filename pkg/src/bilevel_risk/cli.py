"""Command-line interface.

Exit codes: 0 success, 1 solver error, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass

import numpy as np

from . import harness
from .errors import BilevelError, InputError, SolverError
from .lowerlevel import check_dom_f, enumerate_bases
from .model import CVaR, Expectation, load_instance, parse_measure, validate_leader_in_FZ
from .mpcc import build_kkt, regularization_path
from .risk import cvar_breakpoint_min, eval_risk, grad_Q, scenario_profile

FD_STEP = 1e-6


@dataclass(frozen=True)
class RunConfig:
    command: str
    instance: str
    measure: str = "E"
    method: str = "oracle"
    point: str | None = None
    eps0: float = 1.0
    factor: float = 0.1
    eps_min: float = 1e-8
    pattern_cap: int = 20
    grid_res: float = harness.GRID_RES
    seed: int = 0
    out: str | None = None
    threads: int = 1
    family: str = "counterexample"
    levels: str = "2,10,100"
    support_cap: float = 10.0
    multistart: bool = False


def _vector(text: str, n: int) -> np.ndarray:
    try:
        x = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise InputError(f"cannot parse point {text!r}") from None
    if x.size != n:
        raise InputError(f"point has {x.size} coordinates, instance needs n={n}")
    return x


def _emit(cfg: RunConfig, payload: str):
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _validate(cfg, inst):
    report = validate_leader_in_FZ(inst)
    cert = check_dom_f(inst)
    x, z, y = cert.feasible_point
    return {
        "n": inst.n, "m": inst.m, "s": inst.s, "K": inst.K, "sense": inst.sense,
        "leader_samples_outside_FZ": [list(p) for p in report],
        "dom_f": {"x": x.tolist(), "z": z.tolist(), "y": y.tolist(), "dual_u": cert.dual_u.tolist(),
                  "bounded": cert.bounded},
    }


def _risk_at(inst, measure, x):
    return eval_risk(scenario_profile(inst, x), measure)


def _evaluate(cfg, inst, measure):
    x = _vector(cfg.point, inst.n)
    prof = scenario_profile(inst, x)
    out = {"x": x.tolist(), "values": prof.values.tolist(), "measure": str(measure),
           "risk": eval_risk(prof, measure)}
    if isinstance(measure, CVaR):
        out["eta"] = cvar_breakpoint_min(prof, measure.alpha)[0]
    return out


def _grad(cfg, inst, measure):
    x = _vector(cfg.point, inst.n)
    fd = np.empty(inst.n)
    for i in range(inst.n):
        e = np.zeros(inst.n)
        e[i] = FD_STEP
        fd[i] = (_risk_at(inst, measure, x + e) - _risk_at(inst, measure, x - e)) / (2 * FD_STEP)
    out = {"x": x.tolist(), "measure": str(measure), "finite_difference": fd.tolist()}
    if isinstance(measure, CVaR) or getattr(measure, "p", 1.0) != 1.0:
        out["gradient"] = None
        out["differentiable"] = None
        return out
    catalog = enumerate_bases(inst)
    prof = scenario_profile(inst, x, catalog)
    g, diff = grad_Q(inst, catalog, x, measure, prof)
    out.update({
        "gradient": g.tolist(),
        "differentiable": diff,
        "scenarios": [{"on_F_boundary": e.on_F_boundary, "on_Z_boundary": e.on_Z_boundary,
                       "on_V_hyperplane": e.on_V_hyperplane} for e in prof.entries],
        "max_abs_difference": float(np.max(np.abs(g - fd))),
    })
    return out


def _solve(cfg, inst, measure):
    res = harness.solve(inst, measure, cfg.method, eps0=cfg.eps0, factor=cfg.factor, eps_min=cfg.eps_min,
                        pattern_cap=cfg.pattern_cap, grid_res=cfg.grid_res, multistart=cfg.multistart)
    info = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in res.info.items()}
    return {"method": res.method, "measure": str(measure), "value": res.value, "x": res.x.tolist(),
            "risk_at_x": res.risk_at_x, "info": info}


def _path(cfg, inst, measure):
    mp = build_kkt(harness.build_for(inst, measure))
    pr = regularization_path(mp, cfg.eps0, cfg.factor, cfg.eps_min, multistart=cfg.multistart)
    import io

    buf = io.StringIO()
    pr.trace.write_csv(buf)
    return buf.getvalue()


def _stability(cfg, inst, measure):
    try:
        levels = [int(v) for v in cfg.levels.split(",")]
    except ValueError:
        raise InputError(f"bad level list {cfg.levels!r}") from None
    if any(l < 1 for l in levels):
        raise InputError("levels must be positive integers")
    direction = inst.Z[0]
    if cfg.family == "counterexample":
        fam = harness.DistributionFamily.two_point(direction, levels)
    elif cfg.family == "compact":
        fam = harness.DistributionFamily.two_point(direction, levels, cfg.support_cap)
    elif cfg.family == "constant":
        fam = harness.DistributionFamily.constant(inst.Z, inst.pi, levels)
    else:
        raise InputError(f"unknown family {cfg.family!r}")
    table = harness.stability_experiment(inst, fam, measure, cfg.method, eps0=cfg.eps0, factor=cfg.factor,
                                         eps_min=cfg.eps_min, pattern_cap=cfg.pattern_cap, grid_res=cfg.grid_res)
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            table.write_csv(fh)
    return table.summary() + "\n"


def run(cfg: RunConfig) -> int:
    try:
        inst = load_instance(cfg.instance)
    except OSError as exc:
        print(f"error [input]: cannot read instance: {exc.strerror}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error [input] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    try:
        measure = parse_measure(cfg.measure)
        if cfg.command == "validate":
            _emit(cfg, _dump(_validate(cfg, inst)))
        elif cfg.command == "evaluate":
            _emit(cfg, _dump(_evaluate(cfg, inst, measure)))
        elif cfg.command == "grad":
            _emit(cfg, _dump(_grad(cfg, inst, measure)))
        elif cfg.command == "solve":
            _emit(cfg, _dump(_solve(cfg, inst, measure)))
        elif cfg.command == "path":
            _emit(cfg, _path(cfg, inst, measure))
        elif cfg.command == "stability":
            sys.stdout.write(_stability(cfg, inst, measure))
        elif cfg.command == "bases":
            _emit(cfg, _dump(enumerate_bases(inst).to_dict()))
        else:
            raise InputError(f"unknown command {cfg.command!r}")
    except InputError as exc:
        print(f"error [{cfg.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (SolverError, BilevelError) as exc:
        print(f"error [{cfg.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--instance", required=True, help="instance JSON file")
    common.add_argument("--measure", default="E", help="E | EE:eta=..,p=.. | SD:rho=..,p=.. | CVaR:alpha=..")
    common.add_argument("--method", default="oracle", choices=["oracle", "path", "grid"])
    common.add_argument("--eps0", type=float, default=1.0)
    common.add_argument("--factor", type=float, default=0.1)
    common.add_argument("--eps-min", type=float, default=1e-8)
    common.add_argument("--pattern-cap", type=int, default=20)
    common.add_argument("--grid-res", type=float, default=harness.GRID_RES)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("--threads", type=int, default=1, help="worker cap (computation is sequential)")
    common.add_argument("--multistart", action="store_true", help="path method: extra pattern-LP starts")

    p = argparse.ArgumentParser(prog="bilevel-risk", description="Risk-averse bilevel stochastic linear programs")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check data and certify that f has a nonempty domain")
    for name, text in (("evaluate", "scenario values and risk at a leader point"),
                       ("grad", "risk gradient, differentiability report and finite differences")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("point", help="leader point, comma separated")
    sub.add_parser("solve", parents=[common], help="minimize the risk functional")
    sub.add_parser("path", parents=[common], help="regularization path as CSV")
    st = sub.add_parser("stability", parents=[common], help="distribution perturbation experiment")
    st.add_argument("--family", default="counterexample", choices=["counterexample", "compact", "constant"])
    st.add_argument("--levels", default="2,10,100")
    st.add_argument("--support-cap", type=float, default=10.0)
    sub.add_parser("bases", parents=[common], help="dump the dual-feasible basis catalog")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    for name in ("eps0", "factor", "eps_min", "grid_res"):
        if getattr(args, name) <= 0:
            print(f"error [input]: --{name.replace('_', '-')} must be positive", file=sys.stderr)
            return 2
    if args.pattern_cap < 1 or args.threads < 1:
        print("error [input]: --pattern-cap and --threads must be positive", file=sys.stderr)
        return 2
    fields = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__ and v is not None}
    return run(RunConfig(**fields))


if __name__ == "__main__":
    sys.exit(main())
