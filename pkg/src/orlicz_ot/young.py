"""Young's and quasi-Young's functions.

A :class:`Regularizer` bundles a convex integrand ``Phi`` on ``[0, inf)`` with
its derivative density, the convex conjugate of its extension by ``+inf`` to
the negative reals, the derivative of that conjugate, and the slope threshold
``r0 = inf_{t>0} Phi'(t)`` below which the extended conjugate equals
``-Phi(0)``.

All callables are vectorized over numpy arrays.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Regularizer",
    "RegularizerError",
    "make_builtin",
    "from_density_table",
    "from_spec",
    "complementary",
    "shifted_positive_part",
    "ext_value",
    "numeric_legendre",
    "luxemburg_norm",
    "estimate_slope_threshold",
]

# kernel family codes understood by orlicz_ot.kernels
ENTROPY, POWER, TSALLIS, TABULATED = 0, 1, 2, 3

_LEGENDRE_CHECK_TOL = 1e-4


class RegularizerError(ValueError):
    """Invalid regularizer parameters or a failed consistency check."""


@dataclass(frozen=True, eq=False)
class Regularizer:
    family: str
    params: dict
    phi_fn: Callable
    density_fn: Callable
    conj_fn: Callable
    conj_deriv_fn: Callable
    slope_threshold: float
    phi_at_zero: float
    is_young: bool
    conj_second_fn: Callable | None = None
    kernel_code: int = -1
    kernel_params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def phi(self, t):
        return self.phi_fn(t)

    def phi_plus(self, t):
        return np.maximum(self.phi_fn(t), 0.0)

    def density(self, t):
        return self.density_fn(t)

    def conj(self, r):
        return self.conj_fn(r)

    def conj_deriv(self, r):
        return self.conj_deriv_fn(r)

    def is_superlinear(self) -> bool:
        """``Phi(t)/t`` strictly increasing over ``t = 1e2, 1e4, 1e6``."""
        ratios = [float(self.phi_fn(np.float64(t))) / t for t in (1e2, 1e4, 1e6)]
        return all(math.isfinite(x) for x in ratios) and ratios[0] < ratios[1] < ratios[2]

    def ratio_is_monotone(self) -> bool:
        # Phi(t)/t nondecreasing on a geometric probe grid
        t = np.geomspace(1e-6, 1e6, 241)
        ratio = np.asarray(self.phi_fn(t), dtype=float) / t
        return bool(np.all(np.diff(ratio) >= -1e-12 * np.maximum(1.0, np.abs(ratio[1:]))))

    def to_spec(self) -> dict:
        spec = {"family": self.family}
        spec.update(self.params)
        return spec

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items() if k != "density_table")
        return f"Regularizer({self.family}{', ' + args if args else ''})"


def ext_value(reg: Regularizer, t):
    """``Phi(t)`` for ``t >= 0`` and ``+inf`` for negative ``t``."""
    t = np.asarray(t, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(t >= 0, reg.phi_fn(np.maximum(t, 0.0)), np.inf)
    return out if out.ndim else float(out)


# --- builtin families -------------------------------------------------------

def _entropy() -> Regularizer:
    def phi(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
        return out if out.ndim else float(out)

    def density(t):
        with np.errstate(divide="ignore"):
            return np.log(t) + 1.0

    def conj(r):
        return np.exp(np.asarray(r, dtype=float) - 1.0)

    return Regularizer(
        family="entropy",
        params={},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj,
        conj_second_fn=conj,
        slope_threshold=-math.inf,
        phi_at_zero=0.0,
        is_young=False,
        kernel_code=ENTROPY,
        kernel_params=np.zeros(1),
    )


def _power(p: float) -> Regularizer:
    q = p / (p - 1.0)

    def phi(t):
        return np.power(np.asarray(t, dtype=float), p) / p

    def density(t):
        return np.power(np.asarray(t, dtype=float), p - 1.0)

    def conj(r):
        return np.power(np.maximum(r, 0.0), q) / q

    def conj_deriv(r):
        return np.power(np.maximum(r, 0.0), q - 1.0)

    def conj_second(r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(r > 0, (q - 1.0) * np.power(np.where(r > 0, r, 1.0), q - 2.0), 0.0)
        return out if out.ndim else float(out)

    return Regularizer(
        family="power",
        params={"p": p},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj_deriv,
        conj_second_fn=conj_second,
        slope_threshold=0.0,
        phi_at_zero=0.0,
        is_young=True,
        kernel_code=POWER,
        kernel_params=np.array([p]),
    )


def _tsallis(q: float) -> Regularizer:
    # Phi(t) = (t^q - t)/(q - 1); negative on (0, 1)
    e = 1.0 / (q - 1.0)
    r0 = -e

    def phi(t):
        t = np.asarray(t, dtype=float)
        return (np.power(t, q) - t) * e

    def density(t):
        return (q * np.power(np.asarray(t, dtype=float), q - 1.0) - 1.0) * e

    def _base(r):
        return np.maximum((1.0 + (q - 1.0) * np.asarray(r, dtype=float)) / q, 0.0)

    def conj(r):
        return np.power(_base(r), q * e)

    def conj_deriv(r):
        return np.power(_base(r), e)

    def conj_second(r):
        u = _base(r)
        with np.errstate(divide="ignore"):
            out = np.where(u > 0, e * (q - 1.0) / q * np.power(np.where(u > 0, u, 1.0), e - 1.0), 0.0)
        return out if out.ndim else float(out)

    return Regularizer(
        family="tsallis",
        params={"q": q},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj_deriv,
        conj_second_fn=conj_second,
        slope_threshold=r0,
        phi_at_zero=0.0,
        is_young=False,
        kernel_code=TSALLIS,
        kernel_params=np.array([q]),
    )


def _check_against_oracle(reg: Regularizer) -> None:
    r0 = reg.slope_threshold if math.isfinite(reg.slope_threshold) else 0.0
    for r in (r0 - 1.0, r0 + 0.5, r0 + 1.0, r0 + 3.0):
        analytic = float(reg.conj_fn(np.float64(r)))
        numeric = numeric_legendre(reg, r)
        if abs(analytic - numeric) > _LEGENDRE_CHECK_TOL * max(1.0, abs(numeric)):
            raise RegularizerError(
                f"{reg!r}: analytic conjugate {analytic} disagrees with numeric Legendre {numeric} at r={r}"
            )


@functools.lru_cache(maxsize=64)
def _cached_builtin(family: str, param: float | None) -> Regularizer:
    if family == "entropy":
        reg = _entropy()
    elif family == "power":
        if param is None or not param > 1.0:
            raise RegularizerError(f"power family needs p > 1, got {param}")
        reg = _power(float(param))
    elif family == "tsallis":
        if param is None or not param > 1.0:
            raise RegularizerError(f"tsallis family needs q > 1, got {param}")
        reg = _tsallis(float(param))
    else:
        raise RegularizerError(f"unknown builtin family {family!r}")
    _check_against_oracle(reg)
    return reg


def make_builtin(family: str, **params) -> Regularizer:
    """Builtin regularizer: ``entropy``, ``power`` (``p``) or ``tsallis`` (``q``).

    The analytic conjugate is cross-checked against :func:`numeric_legendre`
    on construction.

    >>> float(make_builtin("power", p=2).conj(3.0))
    4.5
    """
    family = family.lower()
    if family == "entropy":
        if params:
            raise RegularizerError(f"entropy takes no parameters, got {sorted(params)}")
        return _cached_builtin("entropy", None)
    key = {"power": "p", "tsallis": "q"}.get(family)
    if key is None:
        raise RegularizerError(f"unknown builtin family {family!r}")
    extra = set(params) - {key}
    if extra:
        raise RegularizerError(f"unexpected parameters for {family}: {sorted(extra)}")
    value = params.get(key)
    return _cached_builtin(family, None if value is None else float(value))


# --- tabulated densities ----------------------------------------------------

def _table_arrays(table):
    arr = np.asarray(table, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise RegularizerError("density_table must be a list of at least two [t, phi(t)] pairs")
    t, v = arr[:, 0].copy(), arr[:, 1].copy()
    if t[0] != 0.0:
        raise RegularizerError("density_table must start at t = 0")
    if np.any(np.diff(t) < 0) or np.any(np.diff(v) < 0):
        raise RegularizerError("density_table must be nondecreasing in both t and phi(t)")
    if not np.all(np.isfinite(arr)):
        raise RegularizerError("density_table entries must be finite")
    return t, v


def _table_cumulative(t, v):
    # Phi at the knots; linear phi on each segment integrates by the trapezoid rule
    return np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t))])


def from_density_table(table) -> Regularizer:
    """Regularizer from monotone ``(t, phi(t))`` pairs, ``phi`` linearly interpolated.

    Repeated ``t`` values encode jumps of the density. Beyond the last knot the
    density is extended with the slope of the final segment; a zero final
    slope gives a function that is not superlinear.
    """
    t, v = _table_arrays(table)
    cum = _table_cumulative(t, v)
    dt = t[-1] - t[-2]
    tail_slope = (v[-1] - v[-2]) / dt if dt > 0 else 0.0

    def density(x):
        x = np.asarray(x, dtype=float)
        # left-continuous at jumps: take the lowest value among repeated knots
        idx = np.clip(np.searchsorted(t, x, side="left"), 1, len(t) - 1)
        t0, t1, v0, v1 = t[idx - 1], t[idx], v[idx - 1], v[idx]
        with np.errstate(invalid="ignore", divide="ignore"):
            w = np.where(t1 > t0, (x - t0) / np.where(t1 > t0, t1 - t0, 1.0), 1.0)
        inner = v0 + w * (v1 - v0)
        out = np.where(x > t[-1], v[-1] + tail_slope * (x - t[-1]), np.where(x <= t[0], v[0], inner))
        return out if out.ndim else float(out)

    def phi(x):
        x = np.asarray(x, dtype=float)
        # segment k with t[k] <= x < t[k+1]; the last knot starts the tail
        k = np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(t) - 1)
        nxt = np.minimum(k + 1, len(t) - 1)
        width = t[nxt] - t[k]
        seg_slope = np.divide(v[nxt] - v[k], width, out=np.zeros_like(width), where=width > 0)
        slope = np.where(k == len(t) - 1, tail_slope, seg_slope)
        d = x - t[k]
        out = cum[k] + v[k] * d + 0.5 * slope * d * d
        return out if out.ndim else float(out)

    kparams = np.concatenate([[float(len(t)), tail_slope], t, v, cum])

    def conj_deriv(r):
        from .kernels import tabulated_conj_deriv

        return tabulated_conj_deriv(np.asarray(r, dtype=float), t, v, tail_slope)

    def conj(r):
        s = np.asarray(conj_deriv(r), dtype=float)
        r = np.asarray(r, dtype=float)
        with np.errstate(invalid="ignore"):
            out = np.where(np.isinf(s), np.inf, r * np.where(np.isinf(s), 0.0, s) - phi(np.where(np.isinf(s), 0.0, s)))
        return out if out.ndim else float(out)

    def conj_second(r):
        from .kernels import tabulated_conj_second

        return tabulated_conj_second(np.asarray(r, dtype=float), t, v, tail_slope)

    young = bool(v[0] == 0.0)
    return Regularizer(
        family="custom",
        params={"density_table": [[float(a), float(b)] for a, b in zip(t, v)]},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj_deriv,
        conj_second_fn=conj_second,
        slope_threshold=float(v[0]),
        phi_at_zero=0.0,
        is_young=young,
        kernel_code=TABULATED,
        kernel_params=kparams,
    )


def from_spec(spec: dict) -> Regularizer:
    """Build a regularizer from its config mapping, e.g. ``{"family": "power", "p": 2.0}``."""
    if not isinstance(spec, dict) or "family" not in spec:
        raise RegularizerError(f"regularizer spec needs a 'family' key, got {spec!r}")
    params = {k: v for k, v in spec.items() if k != "family"}
    family = str(spec["family"]).lower()
    if family == "custom":
        if set(params) != {"density_table"}:
            raise RegularizerError("custom regularizer needs exactly a 'density_table'")
        return from_density_table(params["density_table"])
    return make_builtin(family, **params)


# --- derived regularizers ---------------------------------------------------

def _inverse_density(reg: Regularizer, s: float, growth: float = 2.0) -> float:
    """``inf{t >= 0 : phi(t) >= s}`` by bracket growth and bisection."""
    if float(reg.density_fn(np.float64(0.0))) >= s:
        return 0.0
    lo, hi = 0.0, 1.0
    while float(reg.density_fn(np.float64(hi))) < s:
        lo, hi = hi, hi * growth
        if hi > 1e300:
            return math.inf
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if float(reg.density_fn(np.float64(mid))) >= s:
            hi = mid
        else:
            lo = mid
    return hi


def complementary(reg: Regularizer) -> Regularizer:
    """Complementary Young's function ``Psi`` with density ``psi(s) = inf{t : phi(t) >= s}``.

    ``Psi(s)`` is evaluated through Young's equality ``s psi(s) - Phi(psi(s))``,
    which equals the integral of ``psi`` over ``[0, s]``.
    """
    if not reg.is_young:
        raise RegularizerError(f"{reg!r} is not a Young's function")

    psi_scalar = np.vectorize(lambda s: _inverse_density(reg, float(s)) if s > 0 else 0.0, otypes=[float])

    def density(s):
        out = psi_scalar(np.asarray(s, dtype=float))
        return out if out.ndim else float(out)

    def phi(s):
        s = np.asarray(s, dtype=float)
        ts = psi_scalar(s)
        finite = np.isfinite(ts)
        safe = np.where(finite, ts, 0.0)
        out = np.where(finite, s * safe - reg.phi_fn(safe), np.inf)
        return out if out.ndim else float(out)

    def conj(r):
        # Fenchel-Moreau: Psi* = Phi on [0, inf), extended by -Phi(0) = 0 below the threshold
        r = np.asarray(r, dtype=float)
        return np.where(r > 0, reg.phi_fn(np.maximum(r, 0.0)), 0.0)

    def conj_deriv(r):
        r = np.asarray(r, dtype=float)
        return np.where(r > 0, reg.density_fn(np.maximum(r, 0.0)), 0.0)

    return Regularizer(
        family="complementary",
        params={"of": reg.to_spec()},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj_deriv,
        slope_threshold=0.0,
        phi_at_zero=0.0,
        is_young=True,
    )


def shifted_positive_part(reg: Regularizer, t0: float) -> Regularizer:
    """Young's function ``(Phi(t) - Phi(t0))_+`` with density ``phi * 1_{(t0, inf)}``."""
    if not reg.is_young:
        raise RegularizerError(f"{reg!r} is not a Young's function")
    if t0 < 0:
        raise RegularizerError(f"t0 must be nonnegative, got {t0}")
    if t0 == 0:
        return reg
    phi_t0 = float(reg.phi_fn(np.float64(t0)))

    def phi(t):
        return np.maximum(reg.phi_fn(t) - phi_t0, 0.0)

    def density(t):
        t = np.asarray(t, dtype=float)
        return np.where(t > t0, reg.density_fn(t), 0.0)

    def conj_deriv(r):
        r = np.asarray(r, dtype=float)
        return np.where(r > 0, np.maximum(t0, reg.conj_deriv_fn(r)), 0.0)

    def conj(r):
        r = np.asarray(r, dtype=float)
        s = conj_deriv(r)
        return np.where(r > 0, r * s - phi(s), 0.0)

    return Regularizer(
        family="shifted",
        params={"t0": float(t0), "base": reg.to_spec()},
        phi_fn=phi,
        density_fn=density,
        conj_fn=conj,
        conj_deriv_fn=conj_deriv,
        slope_threshold=0.0,
        phi_at_zero=0.0,
        is_young=True,
    )


def estimate_slope_threshold(density_fn: Callable) -> float:
    """Right limit of the density at 0 from the probes ``1e-1, ..., 1e-12``.

    Returns ``-inf`` when successive decades keep moving the value by a
    non-shrinking amount (logarithmic divergence as for ``t log t``).
    """
    probes = np.array([10.0 ** (-k) for k in range(1, 13)])
    vals = np.asarray(density_fn(probes), dtype=float)
    if not np.all(np.isfinite(vals)):
        return -math.inf
    steps = np.abs(np.diff(vals))
    if steps[-1] > 1e-9 and steps[-1] >= 0.5 * steps[0]:
        return -math.inf
    return float(vals[-1])


# --- numeric Legendre oracle -------------------------------------------------

def _zoom_max(g: Callable, lo: float, hi: float, points: int = 101, geometric: bool = False):
    """Maximize a concave scalar function on ``[lo, hi]`` by repeated grid zooming."""
    if geometric and lo == 0.0:
        grid = np.concatenate([[0.0], np.geomspace(hi * 1e-16, hi, 4 * points)])
    else:
        grid = np.linspace(lo, hi, points)
    best_v = -math.inf
    best_t = lo
    for _ in range(200):
        vals = np.asarray(g(grid), dtype=float)
        vals = np.where(np.isnan(vals), -math.inf, vals)
        k = int(np.argmax(vals))
        v = float(vals[k])
        moved = v - best_v
        if v >= best_v:
            best_v, best_t = v, float(grid[k])
        left = grid[max(k - 1, 0)]
        right = grid[min(k + 1, len(grid) - 1)]
        width = right - left
        if width <= 4e-16 * max(abs(best_t), 1e-300) or (0 <= moved < 1e-14 * max(1.0, abs(v)) and width < 1e-9 * max(1.0, abs(best_t))):
            break
        grid = np.linspace(left, right, points)
    return best_v, best_t


def numeric_legendre(reg: Regularizer, r: float, t_max: float | None = None) -> float:
    """``sup_{t >= 0} (r t - Phi(t))`` by grid search with local refinement.

    Only ``Phi`` is evaluated, so this is an independent check on the
    analytic conjugate.
    """
    r = float(r)

    def g(t):
        return r * np.asarray(t, dtype=float) - reg.phi_fn(t)

    if t_max is None:
        T = 1.0
        for _ in range(200):
            if float(g(2.0 * T)) < float(g(T)):
                break
            T *= 2.0
        else:
            raise RegularizerError(f"{reg!r}: r t - Phi(t) has no decreasing tail at r={r}; Phi not superlinear?")
        t_max = 2.0 * T
    value, _ = _zoom_max(g, 0.0, t_max, geometric=True)
    return value


# --- Luxemburg norm ----------------------------------------------------------

def luxemburg_norm(reg: Regularizer, f, nu, a: float = 1.0) -> float:
    """``inf{gamma >= 0 : sum_cells Phi(|f|/gamma) nu(cell) <= a}``.

    ``f`` holds per-cell coefficients of a piecewise-constant function and
    ``nu`` the cell masses (arrays or grid objects with ``values``/``masses``).
    The integral is an exact finite sum, so only the 1-D search carries error.
    """
    if not a > 0:
        raise ValueError(f"bound a must be positive, got {a}")
    f = np.abs(np.asarray(getattr(f, "values", f), dtype=float)).ravel()
    w = np.asarray(getattr(nu, "masses", nu), dtype=float).ravel()
    if f.shape != w.shape:
        raise ValueError(f"function has {f.size} cells but measure has {w.size}")
    fmax = float(f.max(initial=0.0))
    if fmax == 0.0:
        return 0.0
    keep = w > 0
    f, w = f[keep], w[keep]
    phi0_mass = reg.phi_at_zero * float(w[f == 0].sum())
    pos = f > 0
    fp, wp = f[pos], w[pos]

    def excess(gamma):
        return float(np.dot(reg.phi_fn(fp / gamma), wp)) + phi0_mass - a

    # {gamma : excess <= 0} is [gamma*, inf) by convexity in 1/gamma
    hi = fmax
    while excess(hi) > 0:
        hi *= 2.0
    lo = hi
    while excess(lo) <= 0:
        lo *= 0.5
        if lo < 1e-300:
            return 0.0
    for _ in range(200):
        if hi - lo <= 1e-12 * hi:
            break
        mid = 0.5 * (lo + hi)
        if excess(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return hi
