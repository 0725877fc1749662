"""The fully discretized regularized transport problem.

Unknowns are plan density coefficients ``p_ij`` with respect to the product
base measure ``lam1 (x) lam2``; the marginal constraints read
``sum_j p_ij lam2_j = mu1_i / lam1_i`` and symmetrically for columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grid
from .grid import GridMeasure, GridPartition
from .young import Regularizer, ext_value, luxemburg_norm

__all__ = [
    "ProblemError",
    "TransportProblem",
    "DualPotentials",
    "assemble",
    "from_arrays",
    "from_measures",
    "primal_objective",
    "transport_cost",
    "regularization_term",
    "dual_objective",
    "p_dagger_objective",
    "marginal_residuals",
    "validate_existence_conditions",
]

NORMALIZATION_DRIFT = 1e-6


class ProblemError(ValueError):
    """Inconsistent problem data."""


@dataclass(frozen=True, eq=False)
class TransportProblem:
    grid: GridPartition
    lambda1: GridMeasure
    lambda2: GridMeasure
    mu1: GridMeasure
    mu2: GridMeasure
    cost: np.ndarray
    reg: Regularizer
    gamma: float
    cost_lower_bound: float
    marginal_density_floor: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ProblemError(f"gamma must be positive, got {self.gamma}")
        for mu in (self.mu1, self.mu2):
            if abs(mu.total - 1.0) > 1e-12:
                raise ProblemError(f"marginal total {mu.total!r} is not 1")
        for lam in (self.lambda1, self.lambda2):
            if not lam.has_full_support():
                raise ProblemError("base measure must give every cell positive mass")
        if self.cost.shape != self.shape:
            raise ProblemError(f"cost shape {self.cost.shape} does not match grid {self.shape}")
        if np.any(self.cost < self.cost_lower_bound - 1e-12 * max(1.0, abs(self.cost_lower_bound))):
            raise ProblemError("cost violates its lower bound")

    @property
    def shape(self) -> tuple:
        return (self.lambda1.masses.size, self.lambda2.masses.size)

    @property
    def lam1(self) -> np.ndarray:
        return self.lambda1.masses

    @property
    def lam2(self) -> np.ndarray:
        return self.lambda2.masses

    @property
    def target1(self) -> np.ndarray:
        """Row targets ``mu1_i / lam1_i``."""
        return self.mu1.masses / self.lam1

    @property
    def target2(self) -> np.ndarray:
        return self.mu2.masses / self.lam2

    @property
    def active1(self) -> np.ndarray:
        return self.mu1.masses > 0

    @property
    def active2(self) -> np.ndarray:
        return self.mu2.masses > 0

    @property
    def base_mass(self) -> np.ndarray:
        return np.outer(self.lam1, self.lam2)

    @property
    def min_cell_mass(self) -> float:
        """Smallest product-cell base mass ``min_ij lam1_i lam2_j``."""
        return float(self.lam1.min() * self.lam2.min())

    def with_gamma(self, gamma: float) -> TransportProblem:
        return TransportProblem(self.grid, self.lambda1, self.lambda2, self.mu1, self.mu2, self.cost,
                                self.reg, float(gamma), self.cost_lower_bound, self.marginal_density_floor,
                                dict(self.meta))

    def scaled(self, factor: float) -> TransportProblem:
        """Cost and gamma multiplied by ``factor``."""
        return TransportProblem(self.grid, self.lambda1, self.lambda2, self.mu1, self.mu2, self.cost * factor,
                                self.reg, self.gamma * factor, self.cost_lower_bound * factor,
                                self.marginal_density_floor, dict(self.meta))

    def permuted(self, perm1, perm2) -> TransportProblem:
        perm1, perm2 = np.asarray(perm1), np.asarray(perm2)
        g1 = GridPartition((np.arange(perm1.size + 1.0),))
        g2 = GridPartition((np.arange(perm2.size + 1.0),))
        return TransportProblem(
            g1.product(g2),
            GridMeasure(g1, self.lam1[perm1]),
            GridMeasure(g2, self.lam2[perm2]),
            GridMeasure(g1, self.mu1.masses[perm1]),
            GridMeasure(g2, self.mu2.masses[perm2]),
            self.cost[np.ix_(perm1, perm2)],
            self.reg, self.gamma, self.cost_lower_bound, self.marginal_density_floor, dict(self.meta),
        )


@dataclass
class DualPotentials:
    alpha: np.ndarray
    beta: np.ndarray
    active1: np.ndarray | None = None
    active2: np.ndarray | None = None


def from_arrays(lam1, lam2, mu1, mu2, cost, reg: Regularizer, gamma: float, normalize: bool = True) -> TransportProblem:
    """Problem from raw cell masses on index grids (no geometry attached)."""
    lam1, lam2 = np.asarray(lam1, dtype=float), np.asarray(lam2, dtype=float)
    mu1, mu2 = np.asarray(mu1, dtype=float), np.asarray(mu2, dtype=float)
    if normalize:
        mu1, mu2 = _normalized(mu1, "mu1"), _normalized(mu2, "mu2")
    g1 = GridPartition((np.arange(lam1.size + 1.0),))
    g2 = GridPartition((np.arange(lam2.size + 1.0),))
    cost = np.asarray(cost, dtype=float)
    _check_support(mu1, lam1)
    _check_support(mu2, lam2)
    return TransportProblem(
        g1.product(g2), GridMeasure(g1, lam1), GridMeasure(g2, lam2), GridMeasure(g1, mu1), GridMeasure(g2, mu2),
        cost, reg, float(gamma), float(cost.min()), _density_floor(mu1, lam1, mu2, lam2),
    )


def from_measures(lambda1: GridMeasure, lambda2: GridMeasure, mu1: GridMeasure, mu2: GridMeasure, cost,
                  reg: Regularizer, gamma: float, meta: dict | None = None) -> TransportProblem:
    """Problem from per-axis measures that are already binned on their partitions."""
    m1 = GridMeasure(mu1.partition, _normalized(np.asarray(mu1.masses, dtype=float), "mu1"))
    m2 = GridMeasure(mu2.partition, _normalized(np.asarray(mu2.masses, dtype=float), "mu2"))
    _check_support(m1.masses, lambda1.masses)
    _check_support(m2.masses, lambda2.masses)
    cost = np.asarray(cost, dtype=float)
    return TransportProblem(
        lambda1.partition.product(lambda2.partition), lambda1, lambda2, m1, m2, cost, reg, float(gamma),
        float(cost.min()), _density_floor(m1.masses, lambda1.masses, m2.masses, lambda2.masses), dict(meta or {}),
    )


def _normalized(masses, name):
    total = float(masses.sum())
    if not total > 0:
        raise ProblemError(f"{name} has zero total mass")
    if abs(total - 1.0) > NORMALIZATION_DRIFT:
        raise ProblemError(f"{name} total mass {total!r} differs from 1 by more than {NORMALIZATION_DRIFT}")
    return masses / total


def _check_support(mu, lam):
    if np.any((mu > 0) & (lam <= 0)):
        raise ProblemError("marginal puts mass on a cell with zero base mass")
    if np.any(lam <= 0):
        raise ProblemError("base measure must give every cell positive mass")


def _density_floor(mu1, lam1, mu2, lam2):
    return float(min((mu1 / lam1).min(), (mu2 / lam2).min()))


def assemble(mu_specs, lambda_specs, cost_spec, reg: Regularizer, gamma: float, domains,
             level: int | None = None, cells=None, quad_order: int = 3, base_dir=None) -> TransportProblem:
    """Bin measures and average the cost on the product grid of two 1-D domains.

    ``domains = [(a1, b1), (a2, b2)]``; resolution is ``2**level`` or ``cells``
    per axis. Marginals are renormalized to unit mass (error beyond 1e-6
    drift).
    """
    if len(domains) != 2 or len(mu_specs) != 2 or len(lambda_specs) != 2:
        raise ProblemError("need two domains, two marginal specs and two base measure specs")
    if cells is None and level is None:
        raise ProblemError("need a level or a cell count")
    counts = [cells] * 2 if cells is None or np.isscalar(cells) else list(cells)
    axes = []
    for (lo, hi), c in zip(domains, counts):
        if level is not None:
            axes.append(GridPartition.uniform([(lo, hi)], level=level))
        else:
            axes.append(GridPartition.uniform([(lo, hi)], cells=int(c)))
    part = axes[0].product(axes[1])
    lams = [grid.bin_measure(s, a, base_dir) for s, a in zip(lambda_specs, axes)]
    mus = []
    for k, (s, a) in enumerate(zip(mu_specs, axes)):
        m = grid.bin_measure(s, a, base_dir).masses
        mus.append(GridMeasure(a, _normalized(m, f"mu{k + 1}")))
    for mu, lam in zip(mus, lams):
        _check_support(mu.masses, lam.masses)
    cost = grid.cell_average_cost(cost_spec, part, lambda_specs, quad_order, base_dir)
    return TransportProblem(
        part, lams[0], lams[1], mus[0], mus[1], cost, reg, float(gamma),
        float(cost.min()),
        _density_floor(mus[0].masses, lams[0].masses, mus[1].masses, lams[1].masses),
        meta={"domains": [list(map(float, d)) for d in domains], "level": level, "cells": cells,
              "cost": dict(cost_spec), "mu": list(mu_specs), "lambda": list(lambda_specs)},
    )


# --- objectives -------------------------------------------------------------------

def _plan_array(prob, plan):
    P = np.asarray(getattr(plan, "values", plan), dtype=float)
    if P.shape != prob.shape:
        raise ValueError(f"plan shape {P.shape} does not match problem {prob.shape}")
    return P


def transport_cost(prob: TransportProblem, plan) -> float:
    P = _plan_array(prob, plan)
    return float(np.sum(prob.cost * P * prob.base_mass))


def regularization_term(prob: TransportProblem, plan) -> float:
    """``sum_ij ext Phi(p_ij) lam1_i lam2_j`` (without the factor gamma)."""
    P = _plan_array(prob, plan)
    if np.any(P < 0):
        return math.inf
    return float(np.sum(ext_value(prob.reg, P) * prob.base_mass))


def primal_objective(prob: TransportProblem, plan) -> float:
    """``sum_ij (c_ij p_ij + gamma ext Phi(p_ij)) lam1_i lam2_j``; ``+inf`` for negative entries."""
    P = _plan_array(prob, plan)
    if np.any(P < 0):
        return math.inf
    W = prob.base_mass
    return float(np.sum((prob.cost * P + prob.gamma * ext_value(prob.reg, P)) * W))


def _duals(duals):
    if isinstance(duals, DualPotentials):
        return np.asarray(duals.alpha, dtype=float), np.asarray(duals.beta, dtype=float)
    alpha, beta = duals
    return np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float)


def dual_objective(prob: TransportProblem, duals) -> float:
    """Discrete predual value
    ``sum_i alpha_i mu1_i + sum_j beta_j mu2_j - gamma sum_ij lam1_i lam2_j (ext Phi)*((alpha_i + beta_j - c_ij)/gamma)``.

    Rows and columns without marginal mass take their limit value
    ``alpha = -inf``, i.e. conjugate ``-Phi(0)`` and no linear term.
    """
    alpha, beta = _duals(duals)
    a1, a2 = prob.active1, prob.active2
    R = (alpha[:, None] + beta[None, :] - prob.cost) / prob.gamma
    with np.errstate(over="ignore", invalid="ignore"):
        conj = np.where(np.outer(a1, a2), prob.reg.conj_fn(np.where(np.outer(a1, a2), R, 0.0)), -prob.reg.phi_at_zero)
    lin = float(np.dot(alpha[a1], prob.mu1.masses[a1]) + np.dot(beta[a2], prob.mu2.masses[a2]))
    return lin - prob.gamma * float(np.sum(prob.base_mass * conj))


def p_dagger_objective(prob: TransportProblem, duals) -> float:
    """``(1/q) sum lam (alpha + beta - c)_+^q - gamma^(q-1) (sum alpha mu1 + sum beta mu2)`` for power regularizers.

    At equal arguments this is ``-gamma^(q-1)`` times :func:`dual_objective`
    (all cells active).
    """
    if prob.reg.family != "power":
        raise ProblemError(f"the auxiliary dual needs a power regularizer, got {prob.reg!r}")
    p = float(prob.reg.params["p"])
    q = p / (p - 1.0)
    alpha, beta = _duals(duals)
    S = np.maximum(alpha[:, None] + beta[None, :] - prob.cost, 0.0)
    lin = float(np.dot(alpha, prob.mu1.masses) + np.dot(beta, prob.mu2.masses))
    return float(np.sum(prob.base_mass * S ** q)) / q - prob.gamma ** (q - 1.0) * lin


def marginal_residuals(prob: TransportProblem, plan) -> tuple:
    """λ-weighted L1 violations of the row and column constraints."""
    P = _plan_array(prob, plan)
    rows = prob.lam1 * (P @ prob.lam2)
    cols = prob.lam2 * (prob.lam1 @ P)
    return float(np.abs(rows - prob.mu1.masses).sum()), float(np.abs(cols - prob.mu2.masses).sum())


# --- diagnostics ----------------------------------------------------------------------

def _submultiplicative_check(reg: Regularizer):
    """Spot-check ``Phi(xy) <= C Phi(x) Phi(y)`` or ``Phi(xy) <= C1 x Phi(y) + C2 Phi(x) y`` on a sample grid."""
    xs = np.geomspace(1.5, 1e3, 25)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    lhs = np.asarray(reg.phi_fn(X * Y), dtype=float)
    fx, fy = np.asarray(reg.phi_fn(X), dtype=float), np.asarray(reg.phi_fn(Y), dtype=float)
    out = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        prod = fx * fy
        ratio_mult = np.where(prod > 0, lhs / prod, np.inf)
        additive = X * fy + fx * Y
        ratio_add = np.where(additive > 0, lhs / additive, np.inf)
    c_mult = float(np.max(ratio_mult))
    c_add = float(np.max(ratio_add))
    out["multiplicative_constant"] = c_mult
    out["additive_constant"] = c_add
    # a bounded constant over three decades is taken as empirical evidence
    out["passed"] = bool(min(c_mult, c_add) <= 10.0)
    out["bound"] = "multiplicative" if c_mult <= c_add else "additive"
    return out


def validate_existence_conditions(prob: TransportProblem) -> dict:
    """Diagnostic flags for primal/dual existence; never raises."""
    reg = prob.reg
    norms = []
    for mu, lam in ((prob.mu1, prob.lambda1), (prob.mu2, prob.lambda2)):
        try:
            norms.append(luxemburg_norm(reg, mu.masses / lam.masses, lam.masses))
        except Exception as exc:  # diagnostic only
            norms.append(f"error: {exc}")
    finite = all(isinstance(x, float) and math.isfinite(x) for x in norms)
    sub = _submultiplicative_check(reg)
    floor = prob.marginal_density_floor
    with np.errstate(over="ignore"):
        integ = float(np.sum(prob.base_mass * np.asarray(reg.conj_fn(-prob.cost / prob.gamma), dtype=float)))
    report = {
        "marginal_norms": {"passed": finite, "values": norms},
        "submultiplicativity": sub,
        "density_floor": {
            "passed": floor > 0,
            "value": floor,
            "warning": None if floor > 0 else "marginal density floor is 0; dual attainment is not guaranteed",
        },
        "conjugate_integrability": {"passed": math.isfinite(integ), "value": integ},
        "superlinear": reg.is_superlinear(),
    }
    report["passed"] = all(v["passed"] for k, v in report.items() if isinstance(v, dict)) and report["superlinear"]
    return report
