import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_dual, brute_primal, random_builtin, random_problem
from orlicz_ot import problem
from orlicz_ot.experiments import atom_mixture_problem, binned_dirac_plan, dirac_corner_problem
from orlicz_ot.problem import (DualPotentials, ProblemError, dual_objective, from_arrays, marginal_residuals,
                               p_dagger_objective, primal_objective, regularization_term, transport_cost,
                               validate_existence_conditions)
from orlicz_ot.solvers import solve_regularized
from orlicz_ot.young import make_builtin

QUAD = make_builtin("power", p=2)
ENT = make_builtin("entropy")
LEB = {"kind": "lebesgue"}


def test_atom_mixture_setup_has_single_admissible_entry():
    prob = atom_mixture_problem(2, p=2.0)
    np.testing.assert_allclose(prob.lam1, [2.0, 1.0])
    assert prob.active1.sum() == 1 and prob.active2.sum() == 1
    np.testing.assert_array_equal(prob.cost, 0.0)


def test_uniform_quadratic_cost_is_symmetric():
    prob = problem.assemble([LEB, LEB], [LEB, LEB], {"kind": "sqeuclidean"}, QUAD, 1.0, [(0, 1), (0, 1)], cells=4)
    np.testing.assert_allclose(prob.cost, prob.cost.T, rtol=1e-14)
    assert prob.mu1.total == pytest.approx(1.0)


def test_dirac_corner_only_feasible_cell():
    prob = dirac_corner_problem(3, 0.5)
    assert np.flatnonzero(prob.active1).tolist() == [0]
    assert np.flatnonzero(prob.active2).tolist() == [0]
    P = binned_dirac_plan(prob)
    assert marginal_residuals(prob, P) == (0.0, 0.0)


def test_binned_dirac_entropy_term():
    prob = dirac_corner_problem(2, 0.1)
    term = prob.gamma * regularization_term(prob, binned_dirac_plan(prob))
    assert term == pytest.approx(0.1 * math.log(16.0), abs=1e-15)
    assert term == pytest.approx(0.277259, abs=1e-6)


def test_problem_validation():
    with pytest.raises(ProblemError):
        from_arrays([1, 1], [1, 1], [0.5, 0.4], [0.5, 0.5], np.zeros((2, 2)), QUAD, 1.0)
    with pytest.raises(ProblemError):
        from_arrays([1, 0], [1, 1], [0.5, 0.5], [0.5, 0.5], np.zeros((2, 2)), QUAD, 1.0)
    with pytest.raises(ProblemError):
        from_arrays([1, 1], [1, 1], [0.5, 0.5], [0.5, 0.5], np.zeros((2, 3)), QUAD, 1.0)
    with pytest.raises(ProblemError):
        from_arrays([1, 1], [1, 1], [0.5, 0.5], [0.5, 0.5], np.zeros((2, 2)), QUAD, 0.0)
    with pytest.raises(ProblemError):
        problem.assemble([LEB, LEB], [LEB, LEB], {"kind": "zero"}, QUAD, 1.0, [(0, 1), (0, 1)])


def test_normalization_within_drift():
    prob = from_arrays([1, 1], [1, 1], [0.5, 0.5 + 1e-8], [0.5, 0.5], np.zeros((2, 2)), QUAD, 1.0)
    assert prob.mu1.total == pytest.approx(1.0, abs=1e-15)


def test_objective_trivial_values():
    prob = from_arrays([1, 1], [1, 1], [0.5, 0.5], [0.5, 0.5], np.zeros((2, 2)), QUAD, 1.0)
    assert primal_objective(prob, np.zeros((2, 2))) == 0.0
    assert primal_objective(prob, -np.ones((2, 2))) == math.inf
    assert dual_objective(prob, (np.zeros(2), np.zeros(2))) == 0.0
    assert p_dagger_objective(prob, (np.zeros(2), np.zeros(2))) == 0.0
    assert marginal_residuals(prob, np.zeros((2, 2))) == (1.0, 1.0)
    ent = from_arrays([1], [1], [1], [1], np.zeros((1, 1)), ENT, 1.0)
    assert dual_objective(ent, (np.zeros(1), np.zeros(1))) == pytest.approx(-math.exp(-1.0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), sparse=st.booleans())
def test_objectives_match_double_loops(seed, sparse):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, random_builtin(rng), 4, 5, sparse_mu=sparse)
    P = rng.exponential(size=prob.shape)
    a, b = rng.normal(size=4), rng.normal(size=5)
    assert primal_objective(prob, P) == pytest.approx(brute_primal(prob, P), rel=1e-13, abs=1e-14)
    assert dual_objective(prob, (a, b)) == pytest.approx(brute_dual(prob, a, b), rel=1e-12, abs=1e-13)
    rows = [abs(sum(P[i, j] * prob.lam2[j] for j in range(5)) * prob.lam1[i] - prob.mu1.masses[i]) for i in range(4)]
    assert marginal_residuals(prob, P)[0] == pytest.approx(sum(rows), rel=1e-13)
    assert transport_cost(prob, P) + prob.gamma * regularization_term(prob, P) == pytest.approx(
        primal_objective(prob, P), rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_weak_duality(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, random_builtin(rng), 4, 4)
    feasible = np.outer(prob.target1, prob.target2)  # product coupling
    assert sum(marginal_residuals(prob, feasible)) < 1e-12
    primal = primal_objective(prob, feasible)
    for _ in range(5):
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert dual_objective(prob, (a, b)) <= primal + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), p=st.sampled_from([1.5, 2.0, 3.0]))
def test_p_dagger_identity(seed, p):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, make_builtin("power", p=p), 5, 4)
    q = p / (p - 1)
    a, b = rng.normal(size=5), rng.normal(size=4)
    lam = p_dagger_objective(prob, (a, b))
    assert lam == pytest.approx(-prob.gamma ** (q - 1) * dual_objective(prob, (a, b)), rel=1e-12, abs=1e-13)
    S = np.maximum(a[:, None] + b[None, :] - prob.cost, 0.0)
    brute = sum(prob.lam1[i] * prob.lam2[j] * S[i, j] ** q / q for i in range(5) for j in range(4))
    brute -= prob.gamma ** (q - 1) * (a @ prob.mu1.masses + b @ prob.mu2.masses)
    assert lam == pytest.approx(brute, rel=1e-13, abs=1e-14)


def test_p_dagger_atom_mixture_scan():
    # constant potentials alpha + beta = t with gamma = 1 and q = 2: 4.5 t_+^2 - t on the 2x2 grid
    prob = atom_mixture_problem(2, p=2.0)
    ts = np.linspace(-0.5, 0.5, 101)
    ops = [p_dagger_objective(prob, (np.full(2, t / 2), np.full(2, t / 2))) for t in ts]
    hand = 4.5 * np.maximum(ts, 0.0) ** 2 - ts
    np.testing.assert_allclose(ops, hand, atol=1e-10)
    assert ts[int(np.argmin(ops))] == pytest.approx(1.0 / 9.0, abs=0.01)
    with pytest.raises(ProblemError):
        p_dagger_objective(dirac_corner_problem(1, 1.0), (np.zeros(2), np.zeros(2)))


def test_scaling_and_permutation_invariance():
    rng = np.random.default_rng(11)
    prob = random_problem(rng, QUAD, 5, 6, gamma=0.3)
    base = solve_regularized(prob)
    scaled = solve_regularized(prob.scaled(2.5))
    assert scaled.primal_value == pytest.approx(2.5 * base.primal_value, rel=1e-8)
    np.testing.assert_allclose(scaled.plan, base.plan, atol=1e-8)
    p1, p2 = rng.permutation(5), rng.permutation(6)
    perm = solve_regularized(prob.permuted(p1, p2))
    assert perm.primal_value == pytest.approx(base.primal_value, rel=1e-9)
    np.testing.assert_allclose(perm.plan, base.plan[np.ix_(p1, p2)], atol=1e-8)


def test_strong_duality_on_solved_instance():
    rng = np.random.default_rng(12)
    for reg in (QUAD, ENT):
        rep = solve_regularized(random_problem(rng, reg, 6, 6))
        assert rep.converged
        assert abs(rep.gap) <= 1e-6


def test_dual_potentials_accepted():
    prob = from_arrays([1, 1], [1, 1], [0.5, 0.5], [0.5, 0.5], np.zeros((2, 2)), QUAD, 1.0)
    d = DualPotentials(np.ones(2), np.ones(2))
    assert dual_objective(prob, d) == dual_objective(prob, (np.ones(2), np.ones(2)))


def test_existence_diagnostics():
    ent = validate_existence_conditions(dirac_corner_problem(2, 1.0))
    assert ent["submultiplicativity"]["passed"] and ent["submultiplicativity"]["bound"] == "additive"
    assert not ent["density_floor"]["passed"] and ent["density_floor"]["value"] == 0.0
    assert "not guaranteed" in ent["density_floor"]["warning"]
    quad = validate_existence_conditions(
        problem.assemble([LEB, LEB], [LEB, LEB], {"kind": "sqeuclidean"}, make_builtin("power", p=3), 1.0,
                         [(0, 1), (0, 1)], cells=4))
    assert quad["passed"] and quad["superlinear"]
    assert quad["submultiplicativity"]["bound"] == "multiplicative"
