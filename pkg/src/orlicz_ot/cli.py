"""Command-line front end.

Exit codes: 0 success, 1 config error, 2 solver non-convergence,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .experiments import ScheduleError, run_discretization_sweep, run_smoothing_sweep, validate_coupling
from .grid import GridPartition, MeasureSpecError, bin_measure
from .problem import ProblemError, dual_objective, marginal_residuals, primal_objective, validate_existence_conditions
from .solvers import SolverConfig, solve_regularized
from .young import RegularizerError, from_spec, luxemburg_norm

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_VERIFY = 0, 1, 2, 3
_CONFIG_ERRORS = (ConfigError, ProblemError, MeasureSpecError, RegularizerError, ScheduleError)


class _Meta:
    """Provenance embedded in every output file."""

    def __init__(self, raw: bytes, overrides, seed):
        self.config_sha256 = cfgmod.config_hash(raw, overrides)
        self.seed = seed
        self.version = __version__

    def as_dict(self) -> dict:
        return {"config_sha256": self.config_sha256, "seed": self.seed, "version": self.version}

    def comment(self) -> str:
        return f"config_sha256={self.config_sha256} seed={self.seed} version={self.version}"


def _dump_json(path, payload: dict):
    text = json.dumps(payload, indent=2, default=_jsonable)
    if path:
        Path(path).write_text(text + "\n")
    return text


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def write_plan_csv(path, plan: np.ndarray, meta: _Meta):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {meta.comment()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "p_ij"])
        m, n = plan.shape
        for i in range(m):
            for j in range(n):
                w.writerow([i, j, repr(float(plan[i, j]))])


def read_plan_csv(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"plan file not found: {path}")
    P = np.zeros(shape)
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        try:
            for row in reader:
                P[int(row["i"]), int(row["j"])] = float(row["p_ij"])
        except (KeyError, ValueError, IndexError) as exc:
            raise ConfigError(f"malformed plan file {path}: {exc}") from exc
    return P


def _load(path, overrides=()):
    data, raw = cfgmod.load(path)
    data = cfgmod.apply_overrides(data, overrides)
    return data, raw, Path(path).parent


# --- commands -----------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg, raw, base = _load(args.problem, args.set)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    meta = _Meta(raw, args.set, seed)
    prob = cfgmod.problem_from_config(cfg, base)
    solver = cfgmod.solver_from_config(cfg)
    if args.mode:
        solver = SolverConfig(**{**solver.__dict__, "mode": args.mode})
    rep = solve_regularized(prob, solver)
    payload = rep.to_dict()
    payload.update({
        "primal_value": _finite_or_none(rep.primal_value),
        "dual_value": _finite_or_none(rep.dual_value),
        "gap": _finite_or_none(rep.gap),
        "gamma": prob.gamma,
        "shape": list(prob.shape),
        "regularizer": prob.reg.to_spec(),
        "existence": validate_existence_conditions(prob),
        **meta.as_dict(),
    })
    if args.out:
        write_plan_csv(args.out, rep.plan, meta)
    report_path = args.report or (str(Path(args.out).with_suffix(".json")) if args.out else None)
    text = _dump_json(report_path, payload)
    if not args.quiet:
        print(f"primal {rep.primal_value!r} dual {rep.dual_value!r} gap {rep.gap!r} "
              f"residual {rep.marginal_residual_l1:.3e} sweeps {rep.iterations} converged {rep.converged}")
        if report_path is None:
            print(text)
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_sweep(args) -> int:
    cfg, raw, base = _load(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    meta = _Meta(raw, args.set, seed)
    pcfg, pbase = cfgmod.section_or_file(cfg, "problem", base)
    template = cfgmod.template_from_config(pcfg, pbase)
    schedule = cfgmod.schedule_from_config(cfg, base)
    solver = cfgmod.solver_from_config(cfg)
    kind = cfg.get("kind", "discretization")
    workers = int(args.workers if args.workers is not None else cfg.get("workers", 1))
    timing = bool(args.timing or cfg.get("record_timing", False))
    if kind == "discretization":
        res = run_discretization_sweep(template, schedule, solver, workers=workers, record_timing=timing)
    elif kind == "smoothing":
        fine = cfg.get("fine_cells")
        if fine is None:
            raise ConfigError("smoothing sweeps need 'fine_cells'")
        res = run_smoothing_sweep(template, schedule, int(fine), solver, kernel=cfg.get("kernel", "bump"),
                                  workers=workers, record_timing=timing)
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    out = args.out or cfg.get("out")
    summary = args.summary or cfg.get("summary") or (str(Path(out).with_suffix(".json")) if out else None)
    text = res.to_csv(out, header_comment=meta.comment())
    js = res.to_json(summary, extra=meta.as_dict())
    if not args.quiet:
        if out is None:
            sys.stdout.write(text)
        if summary is None:
            print(js)
        print(f"coupling verdict: {res.coupling.verdict} (ratio {res.coupling.ratio:.4g}); "
              f"gap nonincreasing: {res.gap_nonincreasing()}")
    return EXIT_OK if all(e.converged for e in res.entries) else EXIT_NONCONVERGED


def _grid_function(cfg, base):
    fn = cfg.get("function", {})
    dom = cfg.get("domain", {"x": [0.0, 1.0]})
    x = tuple(float(v) for v in dom.get("x", [0.0, 1.0]))
    if "values" in fn:
        values = np.asarray(fn["values"], dtype=float).ravel()
    elif "constant" in fn:
        values = np.full(int(cfg.get("cells", 1)), float(fn["constant"]))
    else:
        raise ConfigError("[function] needs 'values' or 'constant'")
    part = GridPartition.uniform([x], cells=values.size)
    nu = bin_measure(cfg.get("measure", {"kind": "lebesgue"}), part, base)
    return values, nu.masses


def cmd_norm(args) -> int:
    cfg, raw, base = _load(args.config, args.set)
    meta = _Meta(raw, args.set, cfg.get("seed", 0))
    reg = from_spec(cfg.get("regularizer", {}))
    values, masses = _grid_function(cfg, base)
    value = luxemburg_norm(reg, values, masses, a=float(cfg.get("a", 1.0)))
    print(f"{value:.6f}")
    if args.out:
        _dump_json(args.out, {"norm": value, "regularizer": reg.to_spec(), **meta.as_dict()})
    return EXIT_OK


def _check(rows, name, passed, detail=""):
    rows.append({"check": name, "status": "PASS" if passed else "FAIL", "detail": detail})


def cmd_verify(args) -> int:
    cfg, raw, base = _load(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    meta = _Meta(raw, args.set, seed)
    rows: list = []
    tol = float(cfg.get("tol", 1e-6))
    prob = None
    if "problem" in cfg:
        pcfg, pbase = cfgmod.section_or_file(cfg, "problem", base)
        prob = cfgmod.problem_from_config(pcfg, pbase)
        ex = validate_existence_conditions(prob)
        for key in ("marginal_norms", "submultiplicativity", "conjugate_integrability"):
            _check(rows, f"existence:{key}", ex[key]["passed"])
        floor = ex["density_floor"]
        rows.append({"check": "existence:density_floor", "status": "PASS" if floor["passed"] else "WARN",
                     "detail": floor["warning"] or f"delta={floor['value']:.3g}"})
    if "plan" in cfg:
        if prob is None:
            raise ConfigError("verifying a plan needs a problem")
        path = Path(cfg["plan"])
        P = read_plan_csv(path if path.is_absolute() else base / path, prob.shape)
        _check(rows, "plan:finite", bool(np.all(np.isfinite(P))))
        _check(rows, "plan:positivity", bool(np.all(P >= 0)), f"min={P.min():.3g}")
        r1, r2 = marginal_residuals(prob, P)
        _check(rows, "plan:marginal_residual", r1 + r2 <= tol, f"{r1 + r2:.3e} (tol {tol:g})")
        if np.all(P >= 0):
            rng = np.random.default_rng(seed)
            primal = primal_objective(prob, P)
            slack = 1e-9 + (r1 + r2) * (1.0 + float(np.abs(prob.cost).max()))
            worst = -math.inf
            for _ in range(int(cfg.get("samples", 100))):
                a = rng.normal(size=prob.shape[0])
                b = rng.normal(size=prob.shape[1])
                worst = max(worst, dual_objective(prob, (a, b)) - primal)
            _check(rows, "invariant:weak_duality", worst <= slack, f"max dual-primal {worst:.3e}")
    if "schedule" in cfg or "schedule_file" in cfg:
        schedule = cfgmod.schedule_from_config(cfg, base)
        if "template" in cfg:
            tcfg, tbase = cfgmod.section_or_file(cfg, "template", base)
            tmpl = cfgmod.template_from_config(tcfg, tbase)
            chk = validate_coupling(schedule, tmpl.reg, template=tmpl)
        elif prob is not None:
            chk = validate_coupling(schedule, prob.reg)
        else:
            chk = validate_coupling(schedule, from_spec(cfg.get("regularizer", {"family": "entropy"})))
        _check(rows, f"coupling:{chk.rule}", chk.passed, f"ratio {chk.ratio:.4g}; {chk.criterion}")
    if not rows:
        raise ConfigError("nothing to verify: give a problem, a plan or a schedule")
    ok = all(r["status"] != "FAIL" for r in rows)
    width = max(len(r["check"]) for r in rows)
    for r in rows:
        print(f"{r['check']:<{width}}  {r['status']:<4}  {r['detail']}")
    if args.out:
        _dump_json(args.out, {"checks": rows, "passed": ok, **meta.as_dict()})
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_conjugate_table(args) -> int:
    try:
        spec = json.loads(args.regularizer)
    except ValueError as exc:
        raise ConfigError(f"--regularizer must be JSON: {exc}") from exc
    reg = from_spec(spec)
    r = np.linspace(args.r_min, args.r_max, args.num)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "conj", "conj_deriv"])
    for x, c, d in zip(r, np.atleast_1d(reg.conj(r)), np.atleast_1d(reg.conj_deriv(r))):
        w.writerow([repr(float(x)), repr(float(c)), repr(float(d))])
    if args.out:
        Path(args.out).write_text(f"# version={__version__}\n" + buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orlicz-ot", description="Regularized optimal transport on grids.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, TOML literal values)")
        p.add_argument("--seed", type=int, default=None, help="random seed recorded in all outputs")
        p.add_argument("-q", "--quiet", action="store_true")

    p = sub.add_parser("solve", help="solve one problem file")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", help="plan CSV (i,j,p_ij)")
    p.add_argument("--report", help="report JSON (defaults next to --out)")
    p.add_argument("--mode", choices=["auto", "generic", "entropy_closed_form", "exact"])
    common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run a discretization or smoothing sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="sweep CSV")
    p.add_argument("--summary", help="summary JSON")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--timing", action="store_true", help="record wall-clock seconds (makes the CSV nondeterministic)")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("norm", help="Luxemburg norm of a grid function")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="JSON output")
    common(p)
    p.set_defaults(func=cmd_norm)

    p = sub.add_parser("verify", help="check a problem, plan, or schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="JSON output")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("conjugate-table", help="tabulate the conjugate of a regularizer")
    p.add_argument("--regularizer", required=True, help='JSON spec, e.g. \'{"family": "power", "p": 2}\'')
    p.add_argument("--r-min", type=float, default=-2.0)
    p.add_argument("--r-max", type=float, default=2.0)
    p.add_argument("--num", type=int, default=41)
    p.add_argument("--out")
    p.set_defaults(func=cmd_conjugate_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
