"""Compare the numba kernels with the pure-numpy fallback.

Runs a fixed number of generic sweeps (power p=2 and entropy) and a
transportation simplex solve on both backends and prints the timings.

    python3 benchmarks/bench_kernels.py --size 100 --sweeps 50
"""
import argparse
import time

import numpy as np

from orlicz_ot import kernels, problem
from orlicz_ot.exact import transportation_simplex
from orlicz_ot.solvers import SolverConfig, solve_regularized
from orlicz_ot.young import make_builtin


def random_instance(rng, n, reg, gamma):
    lam = rng.uniform(0.5, 1.5, n)
    mu1, mu2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    return problem.from_arrays(lam, lam[::-1].copy(), mu1, mu2, rng.uniform(0, 1, (n, n)), reg, gamma)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_sweeps(prob, sweeps, repeat):
    # a tiny tol forces exactly `sweeps` sweeps on both backends
    rows = {}
    for backend in (True, False):
        cfg = SolverConfig(mode="generic", tol_marginal=1e-300, max_sweeps=sweeps, use_numba=backend)
        solve_regularized(prob, SolverConfig(mode="generic", max_sweeps=1, use_numba=backend))  # warm up
        rows[backend] = best_of(lambda: solve_regularized(prob, cfg), repeat)
    return rows


def bench_simplex(rng, n, repeat):
    mu1, mu2 = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    mu2 *= mu1.sum() / mu2.sum()
    C = rng.uniform(0, 1, (n, n))
    rows = {}
    for backend in (True, False):
        transportation_simplex(mu1[:3] / mu1[:3].sum(), mu2[:3] / mu2[:3].sum(), C[:3, :3], use_numba=backend)
        rows[backend] = best_of(lambda: transportation_simplex(mu1, mu2, C, use_numba=backend), repeat)
    return rows


def report(name, rows, value):
    (t_nb, a), (t_np, b) = rows[True], rows[False]
    print(f"{name:<22} numba {t_nb * 1e3:9.2f} ms   numpy {t_np * 1e3:9.2f} ms   "
          f"speedup {t_np / t_nb:6.1f}x   |diff| {abs(value(a) - value(b)):.1e}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=100, help="rows = columns of the random instances")
    ap.add_argument("--sweeps", type=int, default=50)
    ap.add_argument("--simplex-size", type=int, default=60)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_ENABLED:
        print("numba disabled or missing; both columns time the numpy path")
    rng = np.random.default_rng(args.seed)
    for label, reg, gamma in (("power p=2 sweeps", make_builtin("power", p=2), 0.1),
                              ("power p=3 sweeps", make_builtin("power", p=3), 0.1),
                              ("entropy sweeps", make_builtin("entropy"), 0.1)):
        prob = random_instance(rng, args.size, reg, gamma)
        report(label, bench_sweeps(prob, args.sweeps, args.repeat), lambda r: r.dual_value)
    report("transport simplex", bench_simplex(rng, args.simplex_size, args.repeat), lambda r: r.value)


if __name__ == "__main__":
    main()
