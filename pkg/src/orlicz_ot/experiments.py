"""Gamma-convergence schedules, sweeps, and fixture reproductions.

A schedule couples the regularization weight to the grid resolution (or to a
smoothing width). Sweeps solve one regularized problem per schedule entry and
compare it with the exact unregularized value.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import grid, problem
from .exact import nw_monotone_1d, transportation_simplex
from .grid import GridMeasure, GridPartition
from .problem import TransportProblem
from .solvers import SolverConfig, solve_regularized
from .young import Regularizer, luxemburg_norm, make_builtin

__all__ = [
    "RULES",
    "ScheduleEntry",
    "Schedule",
    "ProblemTemplate",
    "CouplingCheck",
    "SweepEntry",
    "SweepResult",
    "validate_coupling",
    "run_discretization_sweep",
    "run_smoothing_sweep",
    "reproduce_fixtures",
    "stalled_entropy_schedule",
]

RULES = ("disc_strict", "disc_monotone", "smooth_strict", "smooth_monotone", "custom")
VERDICT_FACTOR = 1.5
CSV_COLUMNS = ("k", "gamma", "delta", "h", "coupling_qty", "reg_value", "ref_value", "gap", "residual", "sweeps",
               "seconds")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleEntry:
    k: int
    gamma: float
    delta: float | None = None


@dataclass(frozen=True)
class Schedule:
    """Ordered ``(k, gamma_k, delta_k)`` entries and the coupling rule they claim.

    Discretization rules need strictly increasing levels; smoothing rules
    run on one fine grid and need strictly decreasing ``delta`` instead.
    ``gamma`` must strictly decrease except under the ``custom`` rule, which
    also admits the fixed-gamma regime.
    """

    entries: tuple
    coupling_rule: str = "disc_strict"

    def __post_init__(self):
        entries = tuple(e if isinstance(e, ScheduleEntry) else ScheduleEntry(*e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.coupling_rule not in RULES:
            raise ScheduleError(f"unknown coupling rule {self.coupling_rule!r}; expected one of {RULES}")
        if not entries:
            raise ScheduleError("schedule is empty")
        g = np.array([e.gamma for e in entries], dtype=float)
        k = np.array([e.k for e in entries])
        if np.any(~(g > 0)):
            raise ScheduleError("gamma values must be positive")
        smoothing = self.coupling_rule.startswith("smooth")
        if self.coupling_rule != "custom" and np.any(np.diff(g) >= 0):
            raise ScheduleError("gamma must be strictly decreasing")
        if smoothing:
            d = np.array([np.nan if e.delta is None else e.delta for e in entries], dtype=float)
            if np.any(~(d > 0)):
                raise ScheduleError("smoothing rules need a positive delta in every entry")
            if np.any(np.diff(d) >= 0):
                raise ScheduleError("delta must be strictly decreasing")
            if np.any(np.diff(k) < 0):
                raise ScheduleError("levels must be nondecreasing")
        elif self.coupling_rule != "custom" and np.any(np.diff(k) <= 0):
            raise ScheduleError("levels must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_rows(cls, rows, coupling_rule="disc_strict") -> Schedule:
        out = []
        for r in rows:
            if isinstance(r, dict):
                delta = r.get("delta")
                out.append(ScheduleEntry(int(r["k"]), float(r["gamma"]), None if delta in (None, "") else float(delta)))
            else:
                r = list(r)
                delta = r[2] if len(r) > 2 else None
                out.append(ScheduleEntry(int(r[0]), float(r[1]), None if delta in (None, "") else float(delta)))
        return cls(tuple(out), coupling_rule)

    @classmethod
    def from_csv(cls, path, coupling_rule="disc_strict") -> Schedule:
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        return cls.from_rows(rows, coupling_rule)

    @classmethod
    def geometric(cls, levels, gamma_first, gamma_last, coupling_rule="disc_strict", deltas=None) -> Schedule:
        levels = list(levels)
        gammas = np.geomspace(gamma_first, gamma_last, len(levels))
        deltas = [None] * len(levels) if deltas is None else list(deltas)
        return cls(tuple(ScheduleEntry(int(k), float(g), d) for k, g, d in zip(levels, gammas, deltas)), coupling_rule)


@dataclass(frozen=True)
class ProblemTemplate:
    """Continuous problem description that can be binned at any level."""

    domains: tuple
    mu: tuple
    lam: tuple
    cost: dict
    reg: Regularizer
    quad_order: int = 3
    base_dir: str | None = None

    def build(self, level=None, gamma=1.0, cells=None) -> TransportProblem:
        return problem.assemble(list(self.mu), list(self.lam), self.cost, self.reg, gamma, list(self.domains),
                                level=level, cells=cells, quad_order=self.quad_order, base_dir=self.base_dir)

    def min_cell_mass(self, level=None, cells=None) -> float:
        h = 1.0
        for dom, spec in zip(self.domains, self.lam):
            part = GridPartition.uniform([dom], cells=cells, level=level)
            h *= float(grid.bin_measure(spec, part, self.base_dir).masses.min())
        return h


# --- coupling rules -------------------------------------------------------------

@dataclass
class CouplingCheck:
    rule: str
    quantities: list
    verdict: str
    ratio: float
    criterion: str = f"PASS iff first/last >= {VERDICT_FACTOR}"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def coupling_quantity(rule: str, reg: Regularizer, gamma: float, h: float | None = None,
                      delta: float | None = None) -> float:
    """The rule's coupling expression for one entry.

    ``h`` is the minimum product-cell base mass; smoothing rules use
    ``delta**2`` (one spatial dimension per axis) in its place.
    """
    if rule in ("disc_strict", "disc_monotone", "custom"):
        if h is None:
            raise ValueError(f"rule {rule} needs h")
        s = float(h)
    elif rule in ("smooth_strict", "smooth_monotone"):
        if delta is None:
            raise ValueError(f"rule {rule} needs delta")
        s = float(delta) ** 2
    else:
        raise ValueError(f"unknown rule {rule!r}")
    val = float(reg.phi_plus(np.float64(1.0 / s)))
    if rule.endswith("monotone"):
        return gamma * s * val
    return gamma * val


def validate_coupling(schedule: Schedule, reg: Regularizer, h=None, template: ProblemTemplate | None = None,
                      factor: float = VERDICT_FACTOR) -> CouplingCheck:
    """Per-entry coupling quantities and a finite-ladder verdict.

    Parameters
    ----------
    schedule : Schedule
    reg : Regularizer
    h : sequence of float, optional
        Minimum product-cell base mass per entry. Taken from ``template``
        when omitted, and from the unit square with Lebesgue base measure
        (``h_k = 4**-k``) when neither is given.
    factor : float
        The sequence passes when it drops by at least this factor from first
        to last entry.
    """
    rule = schedule.coupling_rule
    rule_q = rule
    if rule == "custom":
        rule_q = "smooth_strict" if all(e.delta is not None for e in schedule.entries) else "disc_strict"
    if h is None:
        if template is not None:
            h = [template.min_cell_mass(level=e.k) for e in schedule.entries]
        else:
            h = [4.0 ** -e.k for e in schedule.entries]
    q = [coupling_quantity(rule_q, reg, e.gamma, h=hk, delta=e.delta) for e, hk in zip(schedule.entries, h)]
    first, last = q[0], q[-1]
    if not all(math.isfinite(x) for x in q):
        ratio = math.nan
    elif last > 0:
        ratio = first / last
    else:
        ratio = math.inf if first > 0 else 1.0
    verdict = "pass" if math.isfinite(last) and ratio >= factor else "fail"
    return CouplingCheck(rule=rule, quantities=q, verdict=verdict, ratio=ratio,
                         criterion=f"PASS iff first/last >= {factor}")


def stalled_entropy_schedule(levels=range(1, 6)) -> Schedule:
    """Entropy schedule with cell side ``exp(-1/gamma_k)`` on dyadic grids, i.e. ``gamma_k = 1/(k log 2)``."""
    return Schedule(tuple(ScheduleEntry(int(k), 1.0 / (k * math.log(2.0))) for k in levels), "disc_monotone")


# --- sweep results -------------------------------------------------------------------

@dataclass
class SweepEntry:
    k: int
    gamma: float
    delta: float | None
    h: float
    coupling_qty: float
    reg_value: float
    ref_value: float
    gap: float
    residual: float
    sweeps: int
    seconds: float
    converged: bool = True
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.k, self.gamma, self.delta, self.h, self.coupling_qty, self.reg_value, self.ref_value, self.gap,
                self.residual, self.sweeps, self.seconds]


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class SweepResult:
    kind: str
    coupling: CouplingCheck
    entries: list
    meta: dict = field(default_factory=dict)

    @property
    def gaps(self) -> np.ndarray:
        return np.array([e.gap for e in self.entries], dtype=float)

    def gap_nonincreasing(self, slack: float = 1e-6) -> bool:
        g = self.gaps
        return bool(np.all(np.isfinite(g)) and np.all(np.diff(g) <= slack))

    def to_csv(self, target=None, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.entries:
            w.writerow([_fmt(x) for x in e.row()])
        text = buf.getvalue()
        if target is not None:
            Path(target).write_text(text)
        return text

    def summary(self) -> dict:
        g = self.gaps
        return {
            "kind": self.kind,
            "coupling_rule": self.coupling.rule,
            "coupling_verdict": self.coupling.verdict,
            "coupling_ratio": self.coupling.ratio,
            "coupling_criterion": self.coupling.criterion,
            "gap_nonincreasing": self.gap_nonincreasing(),
            "min_gap_over_first": float(np.min(g) / g[0]) if g.size and g[0] != 0 and np.all(np.isfinite(g)) else None,
            "all_converged": all(e.converged for e in self.entries),
            "errors": [e.error for e in self.entries if e.error],
            "entries": [{**{c: v for c, v in zip(CSV_COLUMNS, e.row())}, "converged": e.converged, **e.extra}
                        for e in self.entries],
            **self.meta,
        }

    def to_json(self, target=None, extra: dict | None = None) -> str:
        text = json.dumps({**self.summary(), **(extra or {})}, indent=2, default=_json_default)
        if target is not None:
            Path(target).write_text(text + "\n")
        return text


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _map_entries(fn, items, workers):
    # order-preserving; entries are independent solves
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _failed_entry(e, h, q, exc):
    return SweepEntry(e.k, e.gamma, e.delta, h, q, math.nan, math.nan, math.nan, math.nan, 0, 0.0,
                      converged=False, error=f"{type(exc).__name__}: {exc}")


def run_discretization_sweep(template: ProblemTemplate, schedule: Schedule, config: SolverConfig | None = None,
                             workers: int = 1, record_timing: bool = False) -> SweepResult:
    """Solve the template at each scheduled level and compare with the exact value at that level.

    Per entry the CSV row holds the regularized optimum ``reg_value``, the
    transportation simplex value ``ref_value`` on the same grid, their
    difference ``gap``, and the final marginal residual. ``seconds`` is 0
    unless ``record_timing`` is set, so repeated runs give identical files.
    Solver failures are recorded in the entry and the sweep continues.
    """
    cfg = config or SolverConfig()
    check = validate_coupling(schedule, template.reg, template=template)
    convex = len(template.domains) == 2 and grid.is_convex_1d_cost(template.cost)

    def one(idx):
        e = schedule.entries[idx]
        h = template.min_cell_mass(level=e.k)
        q = check.quantities[idx]
        try:
            t0 = time.perf_counter()
            prob = template.build(level=e.k, gamma=e.gamma)
            rep = solve_regularized(prob, cfg)
            ref = transportation_simplex(prob.mu1.masses, prob.mu2.masses, prob.cost)
            extra = {"transport_cost": problem.transport_cost(prob, rep.plan), "duality_gap": rep.gap,
                     "simplex_optimal": ref.optimal}
            if convex:
                nw, _ = nw_monotone_1d(prob.mu1.masses, prob.mu2.masses)
                extra["nw_value"] = nw.cost(prob.cost)
            secs = time.perf_counter() - t0 if record_timing else 0.0
            return SweepEntry(e.k, e.gamma, e.delta, h, q, rep.primal_value, ref.value, rep.primal_value - ref.value,
                              rep.marginal_residual_l1, rep.iterations, secs, converged=rep.converged, extra=extra)
        except Exception as exc:  # recorded per entry
            return _failed_entry(e, h, q, exc)

    entries = _map_entries(one, list(range(len(schedule))), workers)
    return SweepResult("discretization", check, entries)


# --- smoothing sweeps ------------------------------------------------------------------

def _atoms(spec):
    """``(points, masses)`` of a purely atomic 1-D spec, else ``None``."""
    kind = str(spec.get("kind", "")).lower()
    if kind == "atom":
        return np.atleast_1d(np.asarray(spec["at"], dtype=float)), np.array([float(spec.get("mass", 1.0))])
    if kind == "mixture":
        pts, ms = [], []
        for part in spec.get("parts") or []:
            a = _atoms(part)
            if a is None:
                return None
            pts.append(a[0])
            ms.append(a[1])
        if not pts:
            return None
        return np.concatenate(pts), np.concatenate(ms)
    return None


def _reference_value(template: ProblemTemplate, fine_cells: int) -> tuple:
    """Exact unregularized value with the original (unsmoothed) marginals."""
    a1, a2 = _atoms(template.mu[0]), _atoms(template.mu[1])
    if a1 is not None and a2 is not None:
        c = grid.cost_function(template.cost)
        if c is not None:
            x, m1 = a1
            y, m2 = a2
            order1, order2 = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
            x, m1, y, m2 = x[order1], m1[order1] / m1.sum(), y[order2], m2[order2] / m2.sum()
            res = transportation_simplex(m1, m2, c(x[:, None], y[None, :]))
            return res.value, "atoms"
    prob = template.build(cells=fine_cells, gamma=1.0)
    return transportation_simplex(prob.mu1.masses, prob.mu2.masses, prob.cost).value, "binned"


def run_smoothing_sweep(template: ProblemTemplate, schedule: Schedule, fine_cells: int,
                        config: SolverConfig | None = None, kernel="bump", workers: int = 1,
                        record_timing: bool = False) -> SweepResult:
    """Mollify the (possibly atomic) marginals at each ``delta_k`` and solve with ``gamma_k``.

    The fine grid (``fine_cells`` per axis on the template domains) is fixed
    for the whole sweep; the domains should extend at least ``max(delta)``
    beyond the marginal supports so that mollification loses no mass.
    ``ref_value`` is the exact value for the ORIGINAL marginals. The JSON
    summary also carries ``gamma * ||d mu1^delta / d lam1||`` (Luxemburg) per
    entry to monitor the divergence regime.
    """
    cfg = config or SolverConfig()
    check = validate_coupling(schedule, template.reg, h=[template.min_cell_mass(cells=fine_cells)] * len(schedule))
    ref, ref_kind = _reference_value(template, fine_cells)
    axes = [GridPartition.uniform([d], cells=fine_cells) for d in template.domains]
    lams = [grid.bin_measure(s, a, template.base_dir) for s, a in zip(template.lam, axes)]
    raw = [grid.bin_measure(s, a, template.base_dir) for s, a in zip(template.mu, axes)]
    cost = grid.cell_average_cost(template.cost, axes[0].product(axes[1]), list(template.lam), template.quad_order,
                                  template.base_dir)
    h = lams[0].masses.min() * lams[1].masses.min()

    def one(idx):
        e = schedule.entries[idx]
        q = check.quantities[idx]
        try:
            t0 = time.perf_counter()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                smoothed = [grid.mollify_measure(m, e.delta, kernel=kernel, pad=False)[0] for m in raw]
            mus = [GridMeasure(a, s.masses) for a, s in zip(axes, smoothed)]
            prob = problem.from_measures(lams[0], lams[1], mus[0], mus[1], cost, template.reg, e.gamma)
            rep = solve_regularized(prob, cfg)
            dens = prob.mu1.masses / prob.lam1
            monitor = e.gamma * luxemburg_norm(template.reg, dens, prob.lam1)
            rows, cols = (prob.lam1 * (rep.plan @ prob.lam2), prob.lam2 * (prob.lam1 @ rep.plan))
            extra = {
                "transport_cost": problem.transport_cost(prob, rep.plan),
                "divergence_monitor": monitor,
                "commutation_error": float(np.abs(rows - prob.mu1.masses).sum() + np.abs(cols - prob.mu2.masses).sum()),
            }
            secs = time.perf_counter() - t0 if record_timing else 0.0
            return SweepEntry(e.k, e.gamma, e.delta, h, q, rep.primal_value, ref, rep.primal_value - ref,
                              rep.marginal_residual_l1, rep.iterations, secs, converged=rep.converged, extra=extra)
        except Exception as exc:  # recorded per entry
            return _failed_entry(e, h, q, exc)

    entries = _map_entries(one, list(range(len(schedule))), workers)
    return SweepResult("smoothing", check, entries, meta={"reference": ref_kind, "fine_cells": fine_cells})


# --- fixtures ------------------------------------------------------------------------------

def atom_mixture_problem(cells: int, p: float = 2.0, gamma: float = 1.0) -> TransportProblem:
    """Lebesgue plus a unit atom at 0 as base measure on [-1, 1] per axis, Dirac marginals at 0, zero cost."""
    lam = {"kind": "mixture", "parts": [{"kind": "lebesgue"}, {"kind": "atom", "at": 0.0}]}
    mu = {"kind": "atom", "at": 0.0}
    return problem.assemble([mu, mu], [lam, lam], {"kind": "zero"}, make_builtin("power", p=p), gamma,
                            [(-1.0, 1.0), (-1.0, 1.0)], cells=cells)


def atom_mixture_value(h: float, p: float = 2.0) -> float:
    """Closed form ``(1/p) (1 + h)^(2 - 2p)`` of the single admissible plan entry."""
    return (1.0 + h) ** (2.0 - 2.0 * p) / p


def dirac_corner_problem(level: int, gamma: float) -> TransportProblem:
    """Dirac marginals at 0 with Lebesgue base on [0, 1] per axis and entropy; quadratic cost."""
    mu = {"kind": "atom", "at": 0.0}
    lam = {"kind": "lebesgue"}
    return problem.assemble([mu, mu], [lam, lam], {"kind": "sqeuclidean"}, make_builtin("entropy"), gamma,
                            [(0.0, 1.0), (0.0, 1.0)], level=level)


def dirac_corner_template() -> ProblemTemplate:
    mu = {"kind": "atom", "at": 0.0}
    lam = {"kind": "lebesgue"}
    return ProblemTemplate(((0.0, 1.0), (0.0, 1.0)), (mu, mu), (lam, lam), {"kind": "sqeuclidean"},
                           make_builtin("entropy"))


def binned_dirac_plan(prob: TransportProblem) -> np.ndarray:
    """Density of the plan concentrating all mass on cell (0, 0)."""
    P = np.zeros(prob.shape)
    P[0, 0] = 1.0 / (prob.lam1[0] * prob.lam2[0])
    return P


def reproduce_fixtures(h_values=(1.0, 0.5, 0.25, 0.125), p_values=(2.0, 1.5, 3.0), levels=(1, 2, 3),
                       gammas=(1.0, 0.1), config: SolverConfig | None = None) -> dict:
    """Comparison tables for both worked examples.

    ``atom_ladder`` rows: solved optimum at cell width ``h`` vs the closed
    form. ``dirac_corner`` rows: entropy term of the binned Dirac plan vs
    ``gamma log(h^-2)``. ``atom_base`` is the variant with a pure atom as base
    measure, where the only plan has density 1.
    """
    cfg = config or SolverConfig()
    rows36 = []
    for p in p_values:
        for h in h_values:
            cells = int(round(2.0 / h))
            rep = solve_regularized(atom_mixture_problem(cells, p), cfg)
            expected = atom_mixture_value(h, p)
            rows36.append({"p": p, "h": h, "value": rep.primal_value, "expected": expected,
                           "abs_error": abs(rep.primal_value - expected), "limit": 1.0 / p})
    rows412 = []
    for level in levels:
        for gamma in gammas:
            prob = dirac_corner_problem(level, gamma)
            side = 2.0 ** -level
            term = gamma * problem.regularization_term(prob, binned_dirac_plan(prob))
            expected = gamma * math.log(side ** -2)
            rows412.append({"level": level, "h": side, "gamma": gamma, "entropy_term": term, "expected": expected,
                            "abs_error": abs(term - expected)})
    atom = problem.from_arrays([1.0], [1.0], [1.0], [1.0], [[0.0]], make_builtin("entropy"), 1.0)
    rep = solve_regularized(atom, cfg)
    atom_term = problem.regularization_term(atom, rep.plan)
    return {
        "atom_ladder": rows36,
        "dirac_corner": rows412,
        "atom_base": {"plan": float(rep.plan[0, 0]), "entropy_term": atom_term, "expected": 0.0},
    }


def fixture_table(report: dict) -> str:
    """Plain-text rendering of :func:`reproduce_fixtures`."""
    lines = ["atom ladder: p h value expected abs_error"]
    for r in report["atom_ladder"]:
        lines.append(f"  {r['p']:g} {r['h']:g} {r['value']:.12g} {r['expected']:.12g} {r['abs_error']:.2e}")
    lines.append("dirac corner: level h gamma entropy_term expected abs_error")
    for r in report["dirac_corner"]:
        lines.append(f"  {r['level']} {r['h']:g} {r['gamma']:g} {r['entropy_term']:.12g} {r['expected']:.12g} "
                     f"{r['abs_error']:.2e}")
    a = report["atom_base"]
    lines.append(f"atom base: plan {a['plan']:g} entropy term {a['entropy_term']:g}")
    return "\n".join(lines)


def entry_dict(e: SweepEntry) -> dict:
    return asdict(e)
