"""Shared random-instance generators and brute-force oracles for the tests."""
import itertools

import numpy as np

from orlicz_ot import problem
from orlicz_ot.young import make_builtin

FAMILIES = {
    "entropy": lambda: make_builtin("entropy"),
    "power1.5": lambda: make_builtin("power", p=1.5),
    "power2": lambda: make_builtin("power", p=2),
    "power3": lambda: make_builtin("power", p=3),
}


def random_builtin(rng):
    kind = rng.integers(3)
    if kind == 0:
        return make_builtin("entropy")
    if kind == 1:
        return make_builtin("power", p=float(np.round(rng.uniform(1.2, 4.0), 2)))
    return make_builtin("tsallis", q=float(np.round(rng.uniform(1.2, 3.0), 2)))


def random_problem(rng, reg, m=None, n=None, gamma=None, sparse_mu=False):
    """Index-grid problem with random base masses, marginals and uniform[0, 1) costs."""
    m = m or int(rng.integers(3, 13))
    n = n or int(rng.integers(3, 13))
    lam1 = rng.uniform(0.2, 1.5, m)
    lam2 = rng.uniform(0.2, 1.5, n)
    mu1 = rng.dirichlet(np.ones(m))
    mu2 = rng.dirichlet(np.ones(n))
    if sparse_mu:
        mu1[rng.integers(m)] = 0.0
        mu2[rng.integers(n)] = 0.0
        mu1, mu2 = mu1 / mu1.sum(), mu2 / mu2.sum()
    C = rng.uniform(0.0, 1.0, (m, n))
    if gamma is None:
        gamma = float(np.exp(rng.uniform(np.log(0.05), 0.0)))
    return problem.from_arrays(lam1, lam2, mu1, mu2, C, reg, gamma)


def brute_primal(prob, P):
    """Double-loop evaluation of the primal objective."""
    m, n = prob.shape
    total = 0.0
    for i in range(m):
        for j in range(n):
            w = prob.lam1[i] * prob.lam2[j]
            p = P[i, j]
            if p < 0:
                return float("inf")
            total += (prob.cost[i, j] * p + prob.gamma * float(prob.reg.phi(p))) * w
    return total


def brute_dual(prob, alpha, beta):
    """Double-loop evaluation of the dual objective, inactive rows/columns dropped."""
    m, n = prob.shape
    total = 0.0
    for i in range(m):
        if prob.mu1.masses[i] > 0:
            total += alpha[i] * prob.mu1.masses[i]
    for j in range(n):
        if prob.mu2.masses[j] > 0:
            total += beta[j] * prob.mu2.masses[j]
    for i in range(m):
        for j in range(n):
            w = prob.lam1[i] * prob.lam2[j]
            if prob.mu1.masses[i] > 0 and prob.mu2.masses[j] > 0:
                r = (alpha[i] + beta[j] - prob.cost[i, j]) / prob.gamma
                total -= prob.gamma * w * float(prob.reg.conj(r))
            else:
                total += prob.gamma * w * prob.reg.phi_at_zero
    return total


def vertex_enumeration(mu1, mu2, C):
    """Minimum transport cost over all basic feasible solutions (small instances only)."""
    m, n = C.shape
    cells = [(i, j) for i in range(m) for j in range(n)]
    A = np.zeros((m + n, m * n))
    for k, (i, j) in enumerate(cells):
        A[i, k] = 1.0
        A[m + j, k] = 1.0
    b = np.concatenate([mu1, mu2])
    best = np.inf
    for basis in itertools.combinations(range(m * n), m + n - 1):
        B = A[:, basis]
        if np.linalg.matrix_rank(B) < m + n - 1:
            continue
        x, *_ = np.linalg.lstsq(B, b, rcond=None)
        if np.any(x < -1e-12) or np.linalg.norm(B @ x - b) > 1e-10:
            continue
        best = min(best, float(sum(x[k] * C[cells[c]] for k, c in enumerate(basis))))
    return best
