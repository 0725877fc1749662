"""Block-coordinate dual ascent for the discrete regularized problem.

A row update sets ``alpha_i`` so that row ``i`` of the recovered plan
``p_ij = conj_deriv((alpha_i + beta_j - c_ij) / gamma)`` carries exactly the
prescribed mass; column updates are symmetric. One sweep is all rows followed
by all columns, so every block update is an exact maximization of the dual in
that coordinate and the dual value never decreases.

When the regularizer allows exact zeros, the support of the plan can split
into blocks whose row and column masses differ; coordinate updates then only
creep. Every few sweeps each such block is therefore shifted as a whole
(``alpha += t`` on its rows, ``beta -= t`` on its columns) with ``t`` the exact
maximizer of the dual along that direction.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .exact import transportation_simplex
from .problem import DualPotentials, TransportProblem, dual_objective, marginal_residuals, primal_objective

__all__ = [
    "SolverConfig",
    "SolveReport",
    "MIN_GAMMA",
    "block_update_row",
    "block_update_col",
    "recover_plan",
    "solve",
    "solve_regularized",
    "solve_entropy_closed_form",
    "solve_exact",
]

MIN_GAMMA = 1e-12
SHIFT_EVERY = 5
MODES = ("auto", "generic", "entropy_closed_form", "exact")


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules and mode selection.

    Attributes
    ----------
    tol_marginal : float
        Stop once the summed L1 marginal residual falls below this.
    tol_root : float
        Relative tolerance of each scalar block equation.
    max_sweeps : int
        Sweep cap; hitting it returns a report with ``converged=False``.
    bracket_growth : float
        Geometric factor for bracket expansion in the block solves.
    mode : str
        ``generic``, ``entropy_closed_form``, ``auto`` (closed form for
        entropy, generic otherwise) or ``exact`` (unregularized simplex).
    use_numba : bool or None
        Kernel backend override; ``None`` follows the process default.
    """

    tol_marginal: float = 1e-9
    tol_root: float = 1e-12
    max_sweeps: int = 10_000
    bracket_growth: float = 2.0
    mode: str = "auto"
    use_numba: bool | None = None

    def __post_init__(self):
        if not (self.tol_marginal > 0 and self.tol_root > 0):
            raise ValueError("tolerances must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not self.bracket_growth > 1:
            raise ValueError("bracket_growth must exceed 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    @classmethod
    def from_mapping(cls, d: dict | None) -> SolverConfig:
        d = dict(d or {})
        unknown = set(d) - {"tol_marginal", "tol_root", "max_sweeps", "bracket_growth", "mode", "use_numba"}
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        if "max_sweeps" in d:
            d["max_sweeps"] = int(d["max_sweeps"])
        return cls(**d)


@dataclass
class SolveReport:
    plan: np.ndarray
    duals: DualPotentials | None
    primal_value: float
    dual_value: float | None
    gap: float | None
    marginal_residual_l1: float
    iterations: int
    converged: bool
    mode: str = "generic"
    bracket_failures: int = 0
    seconds: float = 0.0
    dual_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "primal_value": self.primal_value,
            "dual_value": self.dual_value,
            "gap": self.gap,
            "marginal_residual_l1": self.marginal_residual_l1,
            "iterations": self.iterations,
            "converged": self.converged,
            "mode": self.mode,
            "bracket_failures": self.bracket_failures,
            "seconds": self.seconds,
            "alpha": None if self.duals is None else [float(a) for a in self.duals.alpha],
            "beta": None if self.duals is None else [float(b) for b in self.duals.beta],
        }


# --- state --------------------------------------------------------------------

class _State:
    """Contiguous working copies shared by the row and column passes."""

    def __init__(self, prob: TransportProblem, duals=None):
        self.prob = prob
        self.C = np.ascontiguousarray(prob.cost, dtype=float)
        self.CT = np.ascontiguousarray(prob.cost.T, dtype=float)
        self.rows = np.flatnonzero(prob.active1).astype(np.int64)
        self.cols = np.flatnonzero(prob.active2).astype(np.int64)
        self.t1 = prob.target1.astype(float)
        self.t2 = prob.target2.astype(float)
        if duals is None:
            self.alpha = np.zeros(prob.shape[0])
            self.beta = np.zeros(prob.shape[1])
        else:
            a, b = (duals.alpha, duals.beta) if isinstance(duals, DualPotentials) else duals
            self.alpha = np.array(a, dtype=float)
            self.beta = np.array(b, dtype=float)
            if self.alpha.shape != (prob.shape[0],) or self.beta.shape != (prob.shape[1],):
                raise ValueError("initial duals do not match the problem shape")
        self.root_scale = _root_scale(prob, self.rows, self.cols, self.t1, self.t2)

    def limit(self) -> float:
        # bracket expansion cap; roots lie within gamma * phi(target / active mass) of the costs
        p = self.prob
        bmax = float(np.max(np.abs(self.beta[self.cols]), initial=0.0))
        amax = float(np.max(np.abs(self.alpha[self.rows]), initial=0.0))
        return (1e3 * (1.0 + abs(p.cost_lower_bound) + max(amax, bmax)) + 1e3 * p.gamma
                + 2.0 * (self.root_scale + float(np.max(np.abs(self.C)))))

    def duals(self) -> DualPotentials:
        return DualPotentials(self.alpha.copy(), self.beta.copy(), self.prob.active1.copy(), self.prob.active2.copy())


def _root_scale(prob, rows, cols, t1, t2) -> float:
    """``gamma * max |phi(target / active base mass)|`` over both block families."""
    vals = [0.0]
    for t, w in ((t1[rows], prob.lam2[cols].sum()), (t2[cols], prob.lam1[rows].sum())):
        if t.size and w > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.asarray(prob.reg.density_fn(np.array([t.min(), t.max()]) / w), dtype=float)
            vals.extend(np.abs(d[np.isfinite(d)]).tolist())
    return prob.gamma * max(vals)


def _check_gamma(prob):
    if prob.gamma < MIN_GAMMA:
        raise ValueError(f"gamma={prob.gamma!r} is below {MIN_GAMMA}; use the exact solvers for the unregularized limit")


def _generic_sweep(s: _State, cfg: SolverConfig) -> int:
    p = s.prob
    lim = s.limit()
    f = kernels.row_sweep(s.alpha, s.beta, s.C, p.lam2, s.t1, s.rows, s.cols, p.gamma, p.reg,
                          cfg.tol_root, cfg.bracket_growth, lim, cfg.use_numba)
    f += kernels.row_sweep(s.beta, s.alpha, s.CT, p.lam1, s.t2, s.cols, s.rows, p.gamma, p.reg,
                           cfg.tol_root, cfg.bracket_growth, lim, cfg.use_numba)
    return f


def _entropy_sweep(s: _State, cfg: SolverConfig) -> int:
    p = s.prob
    kernels.entropy_row_sweep(s.alpha, s.beta, s.C, p.lam2, s.t1, s.rows, s.cols, p.gamma, cfg.use_numba)
    kernels.entropy_row_sweep(s.beta, s.alpha, s.CT, p.lam1, s.t2, s.cols, s.rows, p.gamma, cfg.use_numba)
    return 0


def _line_root(dD, t0, direction, step):
    # dD is nonincreasing; bracket its zero on the side given by direction and refine
    if direction * dD(t0) <= 0:
        return None
    far = t0 + direction * step
    for _ in range(200):
        if direction * dD(far) <= 0:
            break
        step *= 2.0
        far = t0 + direction * step
    else:
        return None
    lo, hi = sorted((t0, far))
    return brentq(dD, lo, hi, xtol=1e-15 * max(1.0, abs(far)), rtol=4 * np.finfo(float).eps)


def _component_shift(s: _State) -> bool:
    """Exact dual line search along the shift direction of each support component."""
    p = s.prob
    r0 = p.reg.slope_threshold
    rows, cols = s.rows, s.cols
    if not math.isfinite(r0) or rows.size == 0 or cols.size == 0:
        return False
    g = p.gamma
    R = (s.alpha[rows][:, None] + s.beta[cols][None, :] - s.C[np.ix_(rows, cols)]) / g
    m, n = R.shape
    ii, jj = np.nonzero(R > r0)
    graph = coo_matrix((np.ones(ii.size), (ii, m + jj)), shape=(m + n, m + n))
    ncomp, labels = connected_components(graph, directed=False)
    if ncomp == 1:
        return False
    mu1, mu2 = p.mu1.masses[rows], p.mu2.masses[cols]
    l1, l2 = p.lam1[rows], p.lam2[cols]
    gfun = p.reg.conj_deriv_fn
    moved = False
    for k in range(ncomp):
        RK, CK = labels[:m] == k, labels[m:] == k
        imbalance = float(mu1[RK].sum() - mu2[CK].sum())
        if abs(imbalance) <= 1e-15:
            continue
        out_r, out_w = R[np.ix_(RK, ~CK)], np.outer(l1[RK], l2[~CK])
        in_r, in_w = R[np.ix_(~RK, CK)], np.outer(l1[~RK], l2[CK])

        def dD(t):
            return (imbalance - float(np.sum(out_w * gfun(out_r + t / g)))
                    + float(np.sum(in_w * gfun(in_r - t / g))))

        if imbalance > 0:
            if out_r.size == 0:
                continue
            t0 = g * max(r0 - float(out_r.max()), 0.0)
            t = _line_root(dD, t0, 1.0, g)
        else:
            if in_r.size == 0:
                continue
            t0 = -g * max(r0 - float(in_r.max()), 0.0)
            t = _line_root(dD, t0, -1.0, g)
        if t is None or t == 0.0:
            continue
        s.alpha[rows[RK]] += t
        s.beta[cols[CK]] -= t
        R[RK, :] += t / g
        R[:, CK] -= t / g
        moved = True
    return moved


def _residual(s: _State, cfg: SolverConfig) -> float:
    p = s.prob
    rm = kernels.row_marginals(s.alpha, s.beta, s.C, p.lam2, s.rows, s.cols, p.gamma, p.reg, cfg.use_numba)
    cm = kernels.row_marginals(s.beta, s.alpha, s.CT, p.lam1, s.cols, s.rows, p.gamma, p.reg, cfg.use_numba)
    r = float(np.abs(p.lam1 * rm - p.mu1.masses).sum() + np.abs(p.lam2 * cm - p.mu2.masses).sum())
    return r if math.isfinite(r) else math.inf


def recover_plan(prob: TransportProblem, duals) -> np.ndarray:
    """``p_ij = conj_deriv((alpha_i + beta_j - c_ij)/gamma)`` on active cells, zero elsewhere."""
    a, b = (duals.alpha, duals.beta) if isinstance(duals, DualPotentials) else duals
    a1, a2 = prob.active1, prob.active2
    P = np.zeros(prob.shape)
    if a1.any() and a2.any():
        R = (np.asarray(a)[a1][:, None] + np.asarray(b)[a2][None, :] - prob.cost[np.ix_(a1, a2)]) / prob.gamma
        P[np.ix_(a1, a2)] = np.asarray(prob.reg.conj_deriv_fn(R), dtype=float)
    return P


def _report(s: _State, sweeps, converged, mode, failures, t0, history) -> SolveReport:
    prob = s.prob
    duals = s.duals()
    plan = recover_plan(prob, duals)
    primal = primal_objective(prob, plan)
    dual = dual_objective(prob, duals)
    res = sum(marginal_residuals(prob, plan))
    return SolveReport(
        plan=plan, duals=duals, primal_value=primal, dual_value=dual, gap=primal - dual,
        marginal_residual_l1=res, iterations=sweeps, converged=converged, mode=mode,
        bracket_failures=failures, seconds=time.perf_counter() - t0, dual_history=history,
    )


def _run(prob, cfg, sweep, mode, duals0, record_history, callback) -> SolveReport:
    _check_gamma(prob)
    t0 = time.perf_counter()
    s = _State(prob, duals0)
    history = [dual_objective(prob, (s.alpha, s.beta))] if record_history else []
    failures = 0
    converged = False
    sweeps = 0
    while sweeps < cfg.max_sweeps:
        failures += sweep(s, cfg)
        sweeps += 1
        if sweep is _generic_sweep and sweeps % SHIFT_EVERY == 0:
            _component_shift(s)
        if record_history:
            history.append(dual_objective(prob, (s.alpha, s.beta)))
        if callback is not None:
            callback(sweeps, s.alpha, s.beta)
        if not (np.all(np.isfinite(s.alpha[s.rows])) and np.all(np.isfinite(s.beta[s.cols]))):
            break
        if _residual(s, cfg) <= cfg.tol_marginal:
            converged = True
            break
    return _report(s, sweeps, converged and failures == 0, mode, failures, t0, history)


def solve_regularized(prob: TransportProblem, config: SolverConfig | None = None, duals0=None,
                      record_history: bool = False, callback=None) -> SolveReport:
    """Alternating exact row and column block updates until the marginals match.

    Parameters
    ----------
    prob : TransportProblem
    config : SolverConfig, optional
        ``mode="auto"`` dispatches entropy problems to the closed-form update.
    duals0 : DualPotentials or (alpha, beta), optional
        Warm start; zeros by default.
    record_history : bool
        Keep the dual value after every sweep in ``report.dual_history``.
    callback : callable, optional
        ``callback(sweep, alpha, beta)`` after each sweep.

    Returns
    -------
    SolveReport
        ``converged`` is false when ``max_sweeps`` was hit or a block
        bracket could not be found.
    """
    cfg = config or SolverConfig()
    if cfg.mode == "exact":
        return solve_exact(prob)
    if cfg.mode == "entropy_closed_form" or (cfg.mode == "auto" and prob.reg.family == "entropy"):
        return solve_entropy_closed_form(prob, cfg, duals0, record_history, callback)
    return _run(prob, cfg, _generic_sweep, "generic", duals0, record_history, callback)


def solve_entropy_closed_form(prob: TransportProblem, config: SolverConfig | None = None, duals0=None,
                              record_history: bool = False, callback=None) -> SolveReport:
    """Sinkhorn iteration written in the potentials, with log-sum-exp accumulation."""
    if prob.reg.family != "entropy":
        raise ValueError(f"closed-form updates need the entropy regularizer, got {prob.reg!r}")
    cfg = config or SolverConfig()
    return _run(prob, cfg, _entropy_sweep, "entropy_closed_form", duals0, record_history, callback)


def solve(prob: TransportProblem, config: SolverConfig | None = None, **kwargs) -> SolveReport:
    return solve_regularized(prob, config, **kwargs)


def solve_exact(prob: TransportProblem) -> SolveReport:
    """Unregularized transportation optimum on the same grid; ``gap`` and duals of the regularized problem are ``None``."""
    t0 = time.perf_counter()
    res = transportation_simplex(prob.mu1.masses, prob.mu2.masses, prob.cost)
    plan = res.plan / prob.base_mass
    return SolveReport(
        plan=plan, duals=DualPotentials(res.u, res.v), primal_value=res.value, dual_value=None, gap=None,
        marginal_residual_l1=sum(marginal_residuals(prob, plan)), iterations=res.pivots,
        converged=res.optimal, mode="exact", seconds=time.perf_counter() - t0,
    )


# --- single blocks ----------------------------------------------------------------

def _single(prob, alpha, beta, C, lam, target, i, active_other, cfg):
    if target[i] <= 0:
        return -math.inf
    a = np.array(alpha, dtype=float)
    cols = np.flatnonzero(active_other).astype(np.int64)
    rows = np.array([i], dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = float(prob.reg.density_fn(np.float64(target[i] / lam[cols].sum())))
    scale = prob.gamma * abs(d) if math.isfinite(d) else 0.0
    s_lim = (1e3 * (1.0 + abs(prob.cost_lower_bound) + float(np.max(np.abs(np.asarray(beta)[cols]), initial=0.0)))
             + 1e3 * prob.gamma + 2.0 * (scale + float(np.max(np.abs(C)))))
    fails = kernels.row_sweep(a, np.asarray(beta, dtype=float), C, lam, target, rows, cols, prob.gamma, prob.reg,
                              cfg.tol_root, cfg.bracket_growth, s_lim, cfg.use_numba)
    if fails:
        raise RuntimeError(f"bracket expansion failed for block {i}; inconsistent data")
    return float(a[i])


def block_update_row(prob: TransportProblem, duals, i: int, config: SolverConfig | None = None) -> float:
    """Exact maximizer of the dual in ``alpha_i`` with everything else fixed.

    Returns ``-inf`` for a row without marginal mass (inactive).
    """
    _check_gamma(prob)
    cfg = config or SolverConfig()
    a, b = (duals.alpha, duals.beta) if isinstance(duals, DualPotentials) else duals
    return _single(prob, a, b, np.ascontiguousarray(prob.cost, dtype=float), prob.lam2, prob.target1, i,
                   prob.active2, cfg)


def block_update_col(prob: TransportProblem, duals, j: int, config: SolverConfig | None = None) -> float:
    _check_gamma(prob)
    cfg = config or SolverConfig()
    a, b = (duals.alpha, duals.beta) if isinstance(duals, DualPotentials) else duals
    return _single(prob, b, a, np.ascontiguousarray(prob.cost.T, dtype=float), prob.lam1, prob.target2, j,
                   prob.active1, cfg)
