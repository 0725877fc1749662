"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also collected in the terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy.optimize import linprog

from helpers import FAMILIES, random_builtin, random_problem, vertex_enumeration
from orlicz_ot import grid, problem, solvers
from orlicz_ot.exact import nw_monotone_1d, transportation_simplex
from orlicz_ot.experiments import (ProblemTemplate, Schedule, atom_mixture_problem, binned_dirac_plan,
                                   dirac_corner_problem, dirac_corner_template, run_discretization_sweep,
                                   stalled_entropy_schedule)
from orlicz_ot.grid import GridFunction, GridPartition
from orlicz_ot.solvers import SolverConfig, block_update_col, block_update_row, solve_regularized
from orlicz_ot.young import luxemburg_norm, make_builtin, numeric_legendre


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    # keep JIT compilation out of the timed sections
    rng = np.random.default_rng(0)
    for reg in FAMILIES.values():
        solve_regularized(random_problem(rng, reg(), 4, 4, gamma=0.5))
        solve_regularized(random_problem(rng, reg(), 4, 4, gamma=0.5), SolverConfig(mode="generic"))
    transportation_simplex([0.5, 0.5], [0.5, 0.5], [[0.0, 1.0], [1.0, 0.0]])


# --- 1 --------------------------------------------------------------------------------------

def test_c1_binned_dirac_entropy_term(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for level in (1, 2, 3):
        side = 2.0 ** -level
        for gamma in (1.0, 0.1):
            prob = dirac_corner_problem(level, gamma)
            term = gamma * problem.regularization_term(prob, binned_dirac_plan(prob))
            worst = max(worst, abs(term - gamma * math.log(side ** -2)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 1.0
    acceptance(1, "binned Dirac entropy term equals gamma log(h^-2)", ok, f"max err {worst:.1e}, {secs:.2f}s")
    assert ok


# --- 2 --------------------------------------------------------------------------------------

def _eliminated_value(prob):
    # both marginals are single atoms, so the one free entry is fixed by a marginal constraint
    i = int(np.flatnonzero(prob.mu1.masses)[0])
    j = int(np.flatnonzero(prob.mu2.masses)[0])
    w = prob.lam1[i] * prob.lam2[j]
    p = prob.mu1.masses[i] / w
    return w * (prob.gamma * float(prob.reg.phi(p)))


def test_c2_atom_mixture_ladder(acceptance):
    t0 = time.perf_counter()
    hs = (1.0, 0.5, 0.25, 0.125)
    values, errs = [], []
    for h in hs:
        prob = atom_mixture_problem(int(round(2.0 / h)), p=2.0, gamma=1.0)
        rep = solve_regularized(prob)
        oracle = _eliminated_value(prob)
        values.append(rep.primal_value)
        errs.append(max(abs(rep.primal_value - oracle), abs(oracle - 0.5 * (1.0 + h) ** -2)))
    secs = time.perf_counter() - t0
    trend = all(abs(b - 0.5) < abs(a - 0.5) for a, b in zip(values, values[1:]))
    ok = max(errs) <= 1e-8 and trend and secs < 1.0
    acceptance(2, "atom-mixture ladder matches 1/2 (1+h)^-2 and trends to 1/p", ok,
               f"max err {max(errs):.1e}, values {[round(v, 6) for v in values]}, {secs:.2f}s")
    assert ok


# --- 3 --------------------------------------------------------------------------------------

def _shifted_uniform_template(reg):
    lam = {"kind": "lebesgue"}
    return ProblemTemplate(((0.0, 1.0), (0.5, 1.5)), (lam, lam), (lam, lam), {"kind": "sqeuclidean"}, reg)


@pytest.mark.parametrize("family, g_first, g_last", [("entropy", 10.0, 1e-3), ("power2", 100.0, 1e-4)])
def test_c3_gamma_convergence_sweep(acceptance, family, g_first, g_last):
    reg = FAMILIES[family]()
    sched = Schedule.geometric(range(3, 8), g_first, g_last, "disc_strict")
    t0 = time.perf_counter()
    res = run_discretization_sweep(_shifted_uniform_template(reg), sched)
    secs = time.perf_counter() - t0
    q = res.coupling.quantities
    final = res.entries[-1].reg_value
    rel = abs(final - 0.25) / 0.25
    ok = (q[0] / q[-1] >= 10.0 and rel <= 0.02 and res.gap_nonincreasing(slack=0.0) and secs < 60.0
          and all(e.converged for e in res.entries))
    acceptance(3, f"gamma-convergence sweep ({family})", ok,
               f"final {final:.6f} ({100 * rel:.2f}% off), coupling drop {q[0] / q[-1]:.1f}x, {secs:.1f}s")
    assert ok


# --- 4 --------------------------------------------------------------------------------------

def test_c4_stalled_schedule_detected(acceptance):
    res = run_discretization_sweep(dirac_corner_template(), stalled_entropy_schedule(range(1, 7)))
    g = res.gaps
    ok = res.coupling.verdict == "fail" and bool(np.all(g >= 0.5 * g[0]))
    acceptance(4, "failing coupling detected", ok,
               f"verdict {res.coupling.verdict}, gaps {np.round(g, 6).tolist()}")
    assert ok


# --- 5 --------------------------------------------------------------------------------------

def test_c5_generic_matches_closed_form_entropy(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        prob = random_problem(rng, make_builtin("entropy"), 20, 20)
        opts = dict(tol_marginal=1e-300, max_sweeps=50)
        a = solve_regularized(prob, SolverConfig(mode="generic", **opts))
        b = solve_regularized(prob, SolverConfig(mode="entropy_closed_form", **opts))
        assert a.iterations == b.iterations == 50
        worst = max(worst, np.abs(a.duals.alpha - b.duals.alpha).max(), np.abs(a.duals.beta - b.duals.beta).max())
    ok = worst <= 1e-8
    acceptance(5, "generic block solver equals closed-form entropy updates", ok, f"max dual diff {worst:.1e}")
    assert ok


# --- 6 --------------------------------------------------------------------------------------

def test_c6_strong_duality(acceptance):
    cfg = SolverConfig(tol_marginal=1e-9, max_sweeps=200_000)
    worst, unconverged = {}, 0
    for idx, (name, make) in enumerate(FAMILIES.items()):
        rng = np.random.default_rng(600 + idx)
        reg = make()
        worst[name] = 0.0
        for _ in range(50):
            rep = solve_regularized(random_problem(rng, reg), cfg)
            unconverged += not rep.converged
            worst[name] = max(worst[name], abs(rep.gap) / (1.0 + abs(rep.primal_value)))
    ok = unconverged == 0 and max(worst.values()) <= 1e-6
    acceptance(6, "strong duality at convergence", ok,
               ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", unconverged {unconverged}")
    assert ok


# --- 7 --------------------------------------------------------------------------------------

BUILTINS = [("entropy", {}), ("power", {"p": 1.25}), ("power", {"p": 1.5}), ("power", {"p": 2.0}),
            ("power", {"p": 3.0}), ("power", {"p": 4.0}), ("tsallis", {"q": 1.5}), ("tsallis", {"q": 2.0}),
            ("tsallis", {"q": 3.0})]


def test_c7_conjugate_oracle(acceptance):
    worst = 0.0
    for fam, params in BUILTINS:
        reg = make_builtin(fam, **params)
        r0 = reg.slope_threshold if math.isfinite(reg.slope_threshold) else 0.0
        for r in np.linspace(r0 - 3.0, r0 + 4.0, 57):
            worst = max(worst, abs(float(reg.conj(r)) - numeric_legendre(reg, r)))
    ok = worst <= 1e-5
    acceptance(7, "analytic conjugates match numeric Legendre", ok, f"max err {worst:.1e}")
    assert ok


def test_c7_misprinted_conjugates_rejected():
    # exp(r) for t log t and max(0, r)^2 for t^2/2 both disagree with the oracle
    ent, quad = make_builtin("entropy"), make_builtin("power", p=2)
    rs = np.linspace(-2.0, 3.0, 11)
    assert max(abs(math.exp(r) - numeric_legendre(ent, r)) for r in rs) > 1e-2
    assert max(abs(math.exp(r - 1.0) - numeric_legendre(ent, r)) for r in rs) <= 1e-5
    assert max(abs(max(0.0, r) ** 2 - numeric_legendre(quad, r)) for r in rs) > 1e-2
    assert max(abs(0.5 * max(0.0, r) ** 2 - numeric_legendre(quad, r)) for r in rs) <= 1e-5


# --- 8 --------------------------------------------------------------------------------------

N_CASES = 1000


def _prop_fenchel_young(rng):
    reg = random_builtin(rng)
    t = 0.0 if rng.random() < 0.05 else float(np.exp(rng.uniform(np.log(1e-6), np.log(1e3))))
    r = float(rng.uniform(-5.0, 5.0))
    lhs = float(reg.phi(t)) + float(reg.conj(r))
    scale = 1.0 + abs(r * t) + abs(lhs)
    tight = float(reg.conj_deriv(r))
    eq = float(reg.phi(tight)) + float(reg.conj(r)) - r * tight
    return lhs >= r * t - 1e-12 * scale and abs(eq) <= 1e-9 * (1.0 + abs(r * tight))


def _random_function(rng, n=None):
    n = n or int(rng.integers(1, 30))
    f = rng.exponential(1.0, n) * (rng.random(n) < 0.8)
    if f.max() == 0:
        f[0] = 1.0
    return f, rng.uniform(0.01, 2.0, n)


def _prop_luxemburg(rng):
    reg = random_builtin(rng)
    f, nu = _random_function(rng)
    c = float(np.exp(rng.uniform(-3.0, 3.0)))
    n1 = luxemburg_norm(reg, f, nu)
    homog = abs(luxemburg_norm(reg, c * f, nu) - c * n1) <= 1e-9 * c * n1
    a, b = np.sort(np.exp(rng.uniform(-2.0, 2.0, 2)))
    na, nb = luxemburg_norm(reg, f, nu, a=a), luxemburg_norm(reg, f, nu, a=b)
    return homog and nb <= na * (1 + 1e-10) and a * na <= b * nb * (1 + 1e-10)


def _prop_lower_estimate(rng):
    reg = random_builtin(rng)
    f, nu = _random_function(rng)
    norm = luxemburg_norm(reg, f, nu)
    if norm <= 1.0:
        f = f * rng.uniform(1.01, 5.0) / norm
        norm = luxemburg_norm(reg, f, nu)
    return norm <= 1.0 or float(np.dot(reg.phi(f), nu)) >= norm * (1 - 1e-10)


def _prop_projection(rng):
    reg = random_builtin(rng)
    m, n = rng.integers(1, 10, 2)
    P = rng.exponential(1.0, (m, n)) * (rng.random((m, n)) < 0.7)
    if P.max() == 0:
        P[0, 0] = 1.0
    l1, l2 = rng.uniform(0.01, 2.0, m), rng.uniform(0.01, 2.0, n)
    whole = luxemburg_norm(reg, P, np.outer(l1, l2))
    ok = True
    for marg, base, other in ((P @ l2, l1, l2.sum()), (l1 @ P, l2, l1.sum())):
        ok &= luxemburg_norm(reg, marg, base) <= max(1.0, other) * whole * (1 + 1e-10)
    return ok


def _prop_jensen(rng):
    reg = random_builtin(rng)
    ndim = int(rng.integers(1, 3))
    coarse = GridPartition.uniform([(0.0, 1.0)] * ndim, level=int(rng.integers(0, 4)))
    fine = grid.dyadic_refine(coarse)
    lam = rng.uniform(0.05, 2.0, fine.shape)
    vals = rng.exponential(1.0, fine.shape) * (rng.random(fine.shape) < 0.8)
    cv, cw = grid.coarsen(vals, lam, fine)
    lhs = float(np.sum(reg.phi(cv) * cw))
    rhs = float(np.sum(reg.phi(vals) * lam))
    return lhs <= rhs + 1e-12 * (1.0 + abs(rhs))


def _prop_mollifier(rng):
    nx, ny = rng.integers(4, 24, 2)
    part = GridPartition.uniform([(0.0, 1.0), (-1.0, 2.0)], cells=[int(nx), int(ny)])
    f = GridFunction(part, rng.exponential(1.0, (nx, ny)))
    hx, hy = part.widths(0)[0], part.widths(1)[0]
    delta = float(rng.uniform(1.1, 5.0) * max(hx, hy))
    g, _ = grid.mollify(f, delta)
    marg = GridFunction(part.axis(0), f.values.sum(axis=1) * hy)
    gm, _ = grid.mollify(marg, delta)
    lhs = g.values.sum(axis=1) * g.partition.widths(1)[0]
    same_grid = np.allclose(g.partition.bounds[0], gm.partition.bounds[0], rtol=0, atol=1e-12)
    return same_grid and np.max(np.abs(lhs - gm.values)) <= 1e-12 * max(1.0, float(np.max(gm.values)))


def _prop_dual_ascent(rng):
    reg = random_builtin(rng)
    prob = random_problem(rng, reg, int(rng.integers(2, 7)), int(rng.integers(2, 7)), sparse_mu=rng.random() < 0.2)
    alpha = rng.normal(0.0, 1.0, prob.shape[0])
    beta = rng.normal(0.0, 1.0, prob.shape[1])
    before = problem.dual_objective(prob, (alpha, beta))
    if rng.random() < 0.5:
        i = int(np.flatnonzero(prob.active1)[rng.integers(prob.active1.sum())])
        alpha = alpha.copy()
        alpha[i] = block_update_row(prob, (alpha, beta), i)
    else:
        j = int(np.flatnonzero(prob.active2)[rng.integers(prob.active2.sum())])
        beta = beta.copy()
        beta[j] = block_update_col(prob, (alpha, beta), j)
    after = problem.dual_objective(prob, (alpha, beta))
    return after >= before - 1e-12 * (1.0 + abs(before))


PROPERTIES = {
    "Fenchel-Young inequality": _prop_fenchel_young,
    "Luxemburg homogeneity and norm equivalence": _prop_luxemburg,
    "Luxemburg lower estimate": _prop_lower_estimate,
    "projection contraction": _prop_projection,
    "Jensen coarsening": _prop_jensen,
    "mollifier-marginal commutation": _prop_mollifier,
    "monotone dual ascent per block": _prop_dual_ascent,
}


def test_c8_property_suites(acceptance):
    failures = {}
    for idx, (name, prop) in enumerate(PROPERTIES.items()):
        rng = np.random.default_rng(8000 + idx)
        failures[name] = sum(not prop(rng) for _ in range(N_CASES))
    ok = not any(failures.values())
    acceptance(8, f"property suites ({N_CASES} cases each)", ok,
               ", ".join(f"{k}: {v}" for k, v in failures.items() if v) or "zero failures")
    assert ok


# --- 9 --------------------------------------------------------------------------------------

def test_c9_exact_solver_agreement(acceptance):
    rng = np.random.default_rng(9)
    worst_nw = 0.0
    for _ in range(100):
        m, n = rng.integers(1, 51, 2)
        x = np.sort(rng.uniform(-1.0, 1.0, m))
        y = np.sort(rng.uniform(-1.0, 1.0, n))
        mu1, mu2 = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        mu2 *= mu1.sum() / mu2.sum()
        power = float(rng.choice([1.0, 1.5, 2.0, 3.0]))
        h = lambda d, s=power: np.abs(d) ** s
        _, nw = nw_monotone_1d(mu1, mu2, x, y, h)
        res = transportation_simplex(mu1, mu2, h(x[:, None] - y[None, :]))
        worst_nw = max(worst_nw, abs(nw - res.value))
    worst_bf = 0.0
    for _ in range(30):
        mu1, mu2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
        mu2 *= mu1.sum() / mu2.sum()
        C = rng.uniform(0.0, 1.0, (3, 3))
        worst_bf = max(worst_bf, abs(transportation_simplex(mu1, mu2, C).value - vertex_enumeration(mu1, mu2, C)))
    ok = worst_nw <= 1e-12 and worst_bf <= 1e-12
    acceptance(9, "monotone coupling, simplex and vertex enumeration agree", ok,
               f"nw vs simplex {worst_nw:.1e}, simplex vs vertices {worst_bf:.1e}")
    assert ok


def test_c9_simplex_matches_linprog():
    rng = np.random.default_rng(99)
    for _ in range(10):
        m, n = rng.integers(2, 8, 2)
        mu1, mu2 = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        C = rng.uniform(0.0, 1.0, (m, n))
        A = np.vstack([np.kron(np.eye(m), np.ones(n)), np.kron(np.ones(m), np.eye(n))])
        lp = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([mu1, mu2]), bounds=(0, None), method="highs")
        assert transportation_simplex(mu1, mu2, C).value == pytest.approx(lp.fun, abs=1e-9)
