"""Hot loops of the dual block-ascent solver and the transportation simplex.

Each kernel has a numba-compiled variant and a numpy variant with the same
contract. :data:`USE_NUMBA` picks the default; ``ORLICZ_OT_NO_NUMBA=1`` turns
numba off for the whole process.

Row sweeps are mathematically Jacobi and Gauss-Seidel at once: the update of
row ``i`` depends only on the column potentials, so the numpy variant updates
all rows together.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

USE_NUMBA = NUMBA_ENABLED

# status codes returned by the block solvers
OK, BRACKET_FAILED, NOT_CONVERGED = 0, 1, 2

_EPS = 2.220446049250313e-16


# --- tabulated conjugate derivative (numpy) ----------------------------------

def tabulated_conj_deriv(r, t, v, tail_slope):
    """``inf{s >= 0 : phi(s) >= r}`` for a piecewise-linear tabulated density."""
    r = np.asarray(r, dtype=float)
    idx = np.searchsorted(v, r, side="left")
    inner_idx = np.clip(idx, 1, len(t) - 1)
    v0, v1 = v[inner_idx - 1], v[inner_idx]
    t0, t1 = t[inner_idx - 1], t[inner_idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = t0 + np.divide(r - v0, v1 - v0, out=np.zeros_like(r * 1.0), where=v1 > v0) * (t1 - t0)
        if tail_slope > 0:
            tail = t[-1] + (r - v[-1]) / tail_slope
        else:
            tail = np.full_like(r * 1.0, np.inf)
    out = np.where(idx == 0, 0.0, np.where(idx >= len(t), tail, inner))
    return out if out.ndim else float(out)


def tabulated_conj_second(r, t, v, tail_slope):
    r = np.asarray(r, dtype=float)
    idx = np.searchsorted(v, r, side="left")
    inner_idx = np.clip(idx, 1, len(t) - 1)
    dv = v[inner_idx] - v[inner_idx - 1]
    dt = t[inner_idx] - t[inner_idx - 1]
    inner = np.divide(dt, dv, out=np.zeros_like(dt), where=dv > 0)
    tail = 1.0 / tail_slope if tail_slope > 0 else np.inf
    out = np.where(idx == 0, 0.0, np.where(idx >= len(t), tail, inner))
    return out if out.ndim else float(out)


# --- scalar conjugate derivatives (numba) ------------------------------------

@njit(cache=True)
def _tab_pair(kp, r):
    """Tabulated ``conj_deriv`` and slope; ``kp = [n, tail, t..., v..., cum...]``."""
    n = int(kp[0])
    tail = kp[1]
    if r <= kp[2 + n]:
        return 0.0, 0.0
    # smallest idx with v[idx] >= r
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if kp[2 + n + mid] < r:
            lo = mid + 1
        else:
            hi = mid
    idx = lo
    if idx >= n:
        if tail > 0.0:
            return kp[1 + n] + (r - kp[1 + 2 * n]) / tail, 1.0 / tail
        return np.inf, np.inf
    t0 = kp[1 + idx]
    t1 = kp[2 + idx]
    v0 = kp[1 + n + idx]
    v1 = kp[2 + n + idx]
    slope = (t1 - t0) / (v1 - v0)
    return t0 + (r - v0) * slope, slope


@njit(cache=True, inline="always")
def _cd_pair(code, kp, r):
    """``conj_deriv`` and its derivative at ``r`` with one power evaluation."""
    if code == 0:
        e = math.exp(r - 1.0)
        return e, e
    if code == 1:
        if r <= 0.0:
            return 0.0, 0.0
        p = kp[0]
        if p == 2.0:
            return r, 1.0
        g = r ** (1.0 / (p - 1.0))
        return g, g / ((p - 1.0) * r)
    if code == 2:
        q = kp[0]
        u = (1.0 + (q - 1.0) * r) / q
        if u <= 0.0:
            return 0.0, 0.0
        if q == 2.0:
            return u, 0.5
        g = u ** (1.0 / (q - 1.0))
        return g, g / (q * u)
    return _tab_pair(kp, r)


@njit(cache=True, inline="always")
def _cd(code, kp, r):
    return _cd_pair(code, kp, r)[0]


@njit(cache=True)
def _block_eval(a, w, x, gamma, code, kp):
    F = 0.0
    dF = 0.0
    for j in range(a.shape[0]):
        g, dg = _cd_pair(code, kp, (x + a[j]) / gamma)
        F += w[j] * g
        dF += w[j] * dg
    return F, dF / gamma


@njit(cache=True)
def _solve_block_nb(a, w, target, gamma, code, kp, x0, tol, growth, limit):
    """Root of ``sum_j w_j g((x + a_j)/gamma) = target``; infimum root on flats."""
    ftol = tol * max(1.0, target)
    F, dF = _block_eval(a, w, x0, gamma, code, kp)
    if abs(F - target) <= ftol and dF > 0.0:
        return x0, OK
    # first bracket step from the local Newton step, widened by half
    step = max(gamma, 1e-3)
    if dF > 0.0 and math.isfinite(F):
        step = max(1.5 * abs(F - target) / dF, 1e-12 * (1.0 + abs(x0)))
    if F >= target:
        hi = x0
        lo = x0 - step
        while True:
            F, dF = _block_eval(a, w, lo, gamma, code, kp)
            if F < target:
                break
            hi = lo
            step *= growth
            lo = x0 - step
            if step > limit:
                return lo, BRACKET_FAILED
    else:
        lo = x0
        hi = x0 + step
        while True:
            F, dF = _block_eval(a, w, hi, gamma, code, kp)
            if F >= target:
                break
            lo = hi
            step *= growth
            hi = x0 + step
            if step > limit:
                return hi, BRACKET_FAILED
    x = x0 if lo <= x0 <= hi else hi
    dx_old = hi - lo
    for _ in range(500):
        F, dF = _block_eval(a, w, x, gamma, code, kp)
        if F >= target:
            hi = x
        else:
            lo = x
        if abs(F - target) <= ftol and dF > 0.0:
            return x, OK
        if hi - lo <= 4.0 * _EPS * max(1.0, abs(hi)):
            return hi, OK
        xn = x - (F - target) / dF if dF > 0.0 and math.isfinite(F) else 0.5 * (lo + hi)
        # bisect unless Newton stays inside and at least halves the previous step
        if not (lo < xn < hi) or abs(xn - x) > 0.5 * dx_old:
            xn = 0.5 * (lo + hi)
        dx_old = abs(xn - x)
        x = xn
    return hi, NOT_CONVERGED


@njit(cache=True)
def row_sweep_nb(alpha, beta, C, lam2, target, rows, cols, gamma, code, kp, tol, growth, limit):
    """Exact block update of every active row; returns the number of bracket failures."""
    a = np.empty(cols.shape[0])
    w = np.empty(cols.shape[0])
    for jj in range(cols.shape[0]):
        w[jj] = lam2[cols[jj]]
    failures = 0
    for ii in range(rows.shape[0]):
        i = rows[ii]
        for jj in range(cols.shape[0]):
            a[jj] = beta[cols[jj]] - C[i, cols[jj]]
        x, status = _solve_block_nb(a, w, target[i], gamma, code, kp, alpha[i], tol, growth, limit)
        if status != OK:
            failures += 1
        alpha[i] = x
    return failures


@njit(cache=True)
def entropy_row_sweep_nb(alpha, beta, C, lam2, target, rows, cols, gamma):
    for ii in range(rows.shape[0]):
        i = rows[ii]
        m = -np.inf
        for jj in range(cols.shape[0]):
            j = cols[jj]
            z = (beta[j] - C[i, j]) / gamma
            if z > m:
                m = z
        s = 0.0
        for jj in range(cols.shape[0]):
            j = cols[jj]
            s += lam2[j] * math.exp((beta[j] - C[i, j]) / gamma - m)
        alpha[i] = gamma * (1.0 + math.log(target[i]) - m - math.log(s))
    return 0


@njit(cache=True)
def row_marginals_nb(alpha, beta, C, lam2, rows, cols, gamma, code, kp, out):
    for ii in range(rows.shape[0]):
        i = rows[ii]
        s = 0.0
        for jj in range(cols.shape[0]):
            j = cols[jj]
            s += lam2[j] * _cd(code, kp, (alpha[i] + beta[j] - C[i, j]) / gamma)
        out[i] = s
    return out


# --- numpy variants -----------------------------------------------------------

def _conj_deriv_np(reg, r):
    return np.asarray(reg.conj_deriv_fn(r), dtype=float)


def _conj_second_np(reg, r):
    if reg.conj_second_fn is None:
        return np.zeros_like(r)
    return np.asarray(reg.conj_second_fn(r), dtype=float)


def solve_blocks_np(A, w, target, gamma, reg, x0, tol, growth, limit):
    """Vectorized version of the per-row root solve; ``A`` holds ``beta_j - c_ij`` per row."""
    x0 = np.asarray(x0, dtype=float).copy()
    target = np.asarray(target, dtype=float)
    ftol = tol * np.maximum(1.0, target)
    status = np.zeros(x0.shape, dtype=np.int64)

    def F(x):
        R = (x[:, None] + A) / gamma
        with np.errstate(over="ignore", invalid="ignore"):
            return _conj_deriv_np(reg, R) @ w, (_conj_second_np(reg, R) @ w) / gamma

    f0, _ = F(x0)
    above = f0 >= target
    step = np.full(x0.shape, max(gamma, 1e-3))
    lo = np.where(above, x0 - step, x0)
    hi = np.where(above, x0, x0 + step)
    # grow the bracket on the open side until the sign changes
    pending = np.ones(x0.shape, dtype=bool)
    while pending.any():
        probe = np.where(above, lo, hi)
        fp, _ = F(probe)
        done = np.where(above, fp < target, fp >= target)
        pending &= ~done
        if not pending.any():
            break
        step = np.where(pending, step * growth, step)
        failed = pending & (step > limit)
        status[failed] = BRACKET_FAILED
        pending &= ~failed
        hi = np.where(pending & above, lo, hi)
        lo = np.where(pending & ~above, hi, lo)
        lo = np.where(pending & above, x0 - step, lo)
        hi = np.where(pending & ~above, x0 + step, hi)
    x = hi.copy()
    dx_old = hi - lo
    active = status == OK
    for _ in range(500):
        if not active.any():
            break
        fx, dfx = F(x)
        ge = fx >= target
        hi = np.where(active & ge, x, hi)
        lo = np.where(active & ~ge, x, lo)
        conv = (np.abs(fx - target) <= ftol) & (dfx > 0)
        collapsed = hi - lo <= 4.0 * _EPS * np.maximum(1.0, np.abs(hi))
        x = np.where(active & collapsed & ~conv, hi, x)
        active &= ~(conv | collapsed)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = np.where((dfx > 0) & np.isfinite(fx), x - (fx - target) / dfx, 0.5 * (lo + hi))
        bad = ~((lo < xn) & (xn < hi)) | (np.abs(xn - x) > 0.5 * dx_old)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        dx_old = np.where(active, np.abs(xn - x), dx_old)
        x = np.where(active, xn, x)
    status[active] = NOT_CONVERGED
    x = np.where(status == BRACKET_FAILED, np.where(above, lo, hi), x)
    return x, status


def row_sweep_np(alpha, beta, C, lam2, target, rows, cols, gamma, reg, tol, growth, limit):
    if rows.size == 0:
        return 0
    A = beta[cols][None, :] - C[np.ix_(rows, cols)]
    x, status = solve_blocks_np(A, lam2[cols], target[rows], gamma, reg, alpha[rows], tol, growth, limit)
    alpha[rows] = x
    return int(np.count_nonzero(status))


def entropy_row_sweep_np(alpha, beta, C, lam2, target, rows, cols, gamma):
    if rows.size == 0:
        return 0
    Z = (beta[cols][None, :] - C[np.ix_(rows, cols)]) / gamma
    m = Z.max(axis=1)
    s = np.exp(Z - m[:, None]) @ lam2[cols]
    alpha[rows] = gamma * (1.0 + np.log(target[rows]) - m - np.log(s))
    return 0


def row_marginals_np(alpha, beta, C, lam2, rows, cols, gamma, reg, out):
    if rows.size:
        R = (alpha[rows][:, None] + beta[cols][None, :] - C[np.ix_(rows, cols)]) / gamma
        out[rows] = _conj_deriv_np(reg, R) @ lam2[cols]
    return out


# --- dispatch -----------------------------------------------------------------

def numba_capable(reg) -> bool:
    return reg.kernel_code >= 0


def row_sweep(alpha, beta, C, lam2, target, rows, cols, gamma, reg, tol, growth, limit, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else (use_numba and NUMBA_ENABLED)
    if use_numba and numba_capable(reg):
        return row_sweep_nb(alpha, beta, C, lam2, target, rows, cols, gamma,
                            reg.kernel_code, reg.kernel_params, tol, growth, limit)
    return row_sweep_np(alpha, beta, C, lam2, target, rows, cols, gamma, reg, tol, growth, limit)


def entropy_row_sweep(alpha, beta, C, lam2, target, rows, cols, gamma, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else (use_numba and NUMBA_ENABLED)
    if use_numba:
        return entropy_row_sweep_nb(alpha, beta, C, lam2, target, rows, cols, gamma)
    return entropy_row_sweep_np(alpha, beta, C, lam2, target, rows, cols, gamma)


def row_marginals(alpha, beta, C, lam2, rows, cols, gamma, reg, use_numba=None):
    out = np.zeros(C.shape[0])
    use_numba = USE_NUMBA if use_numba is None else (use_numba and NUMBA_ENABLED)
    if use_numba and numba_capable(reg):
        return row_marginals_nb(alpha, beta, C, lam2, rows, cols, gamma, reg.kernel_code, reg.kernel_params, out)
    return row_marginals_np(alpha, beta, C, lam2, rows, cols, gamma, reg, out)
