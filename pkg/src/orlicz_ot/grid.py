"""Nested grid partitions of boxes, cell measures, densities and mollification."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve1d

__all__ = [
    "GridPartition",
    "GridMeasure",
    "GridFunction",
    "MeasureSpecError",
    "dyadic_refine",
    "bin_measure",
    "binned_density",
    "plan_marginal",
    "cell_quadrature",
    "cell_average_cost",
    "bump_kernel",
    "mollify",
    "mollify_measure",
    "partition_gap",
    "coarsen",
]


class MeasureSpecError(ValueError):
    """Malformed measure or cost specification."""


@dataclass(frozen=True, eq=False)
class GridPartition:
    """Product of per-axis cell decompositions of a compact box.

    ``parent_index[a][c]`` is the index of the coarser cell containing cell
    ``c`` on axis ``a`` (only set for partitions produced by refinement).
    """

    bounds: tuple
    level: int = 0
    parent: GridPartition | None = None
    parent_index: tuple | None = None

    def __post_init__(self):
        axes = tuple(np.asarray(b, dtype=float) for b in self.bounds)
        for b in axes:
            if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
                raise ValueError("cell boundaries must be strictly increasing with at least one cell")
        object.__setattr__(self, "bounds", axes)

    @classmethod
    def uniform(cls, box, cells=None, level=None) -> GridPartition:
        """Uniform partition of ``box = [(lo, hi), ...]`` with ``cells`` or ``2**level`` cells per axis."""
        if (cells is None) == (level is None):
            raise ValueError("give exactly one of cells, level")
        box = [tuple(map(float, b)) for b in box]
        if level is not None:
            cells = 2 ** int(level)
        counts = [cells] * len(box) if np.isscalar(cells) else list(cells)
        lvl = int(level) if level is not None else 0
        return cls(tuple(np.linspace(lo, hi, int(c) + 1) for (lo, hi), c in zip(box, counts)), level=lvl)

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    @property
    def shape(self) -> tuple:
        return tuple(b.size - 1 for b in self.bounds)

    @property
    def box(self) -> tuple:
        return tuple((float(b[0]), float(b[-1])) for b in self.bounds)

    def widths(self, axis=0) -> np.ndarray:
        return np.diff(self.bounds[axis])

    def centers(self, axis=0) -> np.ndarray:
        b = self.bounds[axis]
        return 0.5 * (b[1:] + b[:-1])

    def axis(self, a: int) -> GridPartition:
        return GridPartition((self.bounds[a],), level=self.level)

    def product(self, other: GridPartition) -> GridPartition:
        return GridPartition(self.bounds + other.bounds, level=max(self.level, other.level))

    def cell_volumes(self) -> np.ndarray:
        vol = np.ones(())
        for a in range(self.ndim):
            vol = np.multiply.outer(vol, self.widths(a))
        return vol

    def locate(self, x, axis=0) -> int:
        """Index of the cell containing ``x``; boundary points go to the lower-index cell."""
        b = self.bounds[axis]
        if not (b[0] <= x <= b[-1]):
            raise MeasureSpecError(f"point {x} lies outside [{b[0]}, {b[-1]}]")
        return max(int(np.searchsorted(b, x, side="left")) - 1, 0)

    def is_uniform(self, axis=0, rtol=1e-9) -> bool:
        w = self.widths(axis)
        return bool(np.allclose(w, w[0], rtol=rtol, atol=0))

    def nests_in(self, coarse: GridPartition) -> bool:
        """Every cell of ``self`` lies in exactly one cell of ``coarse``."""
        if self.ndim != coarse.ndim:
            return False
        for fb, cb in zip(self.bounds, coarse.bounds):
            if not (np.isclose(fb[0], cb[0]) and np.isclose(fb[-1], cb[-1])):
                return False
            # every coarse boundary must be a fine boundary
            idx = np.searchsorted(fb, cb)
            idx = np.clip(idx, 0, fb.size - 1)
            near = np.minimum(np.abs(fb[idx] - cb), np.abs(fb[np.maximum(idx - 1, 0)] - cb))
            if np.any(near > 1e-12 * max(1.0, float(np.abs(cb).max()))):
                return False
        return True


@dataclass(frozen=True, eq=False)
class GridMeasure:
    partition: GridPartition
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.shape != self.partition.shape:
            raise ValueError(f"mass array {m.shape} does not match partition {self.partition.shape}")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("cell masses must be finite and nonnegative")
        object.__setattr__(self, "masses", m)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def has_full_support(self) -> bool:
        return bool(np.all(self.masses > 0))


@dataclass(frozen=True, eq=False)
class GridFunction:
    partition: GridPartition
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.partition.shape:
            raise ValueError(f"value array {v.shape} does not match partition {self.partition.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "values", v)

    def integrate(self, nu: GridMeasure) -> float:
        return float(np.sum(self.values * nu.masses))


def dyadic_refine(p: GridPartition) -> GridPartition:
    """Split every cell in half along every axis, recording parent indices."""
    new_bounds = []
    parents = []
    for b in p.bounds:
        mid = 0.5 * (b[1:] + b[:-1])
        nb = np.empty(2 * b.size - 1)
        nb[0::2] = b
        nb[1::2] = mid
        new_bounds.append(nb)
        parents.append(np.repeat(np.arange(b.size - 1), 2))
    return GridPartition(tuple(new_bounds), level=p.level + 1, parent=p, parent_index=tuple(parents))


# --- measures -----------------------------------------------------------------

def _read_cell_file(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(line for line in fh if line.strip() and not line.startswith("#")):
            if rec[0].strip().lower() == "index":
                continue
            rows.append((int(rec[0]), float(rec[1])))
    if not rows:
        raise MeasureSpecError(f"no cell masses in {path}")
    idx = np.array([r[0] for r in rows])
    out = np.zeros(idx.max() + 1)
    out[idx] = [r[1] for r in rows]
    return out


def _interval_overlap(bounds, lo, hi):
    return np.clip(np.minimum(bounds[1:], hi) - np.maximum(bounds[:-1], lo), 0.0, None)


def bin_measure(spec, p: GridPartition, base_dir: str | Path | None = None) -> GridMeasure:
    """Exact cell masses of a measure spec on ``p``.

    Spec kinds: ``lebesgue`` (``scale``, optional ``support`` box), ``atom``
    (``at``, ``mass``), ``mixture`` (``parts``) and ``cells`` (``masses`` list
    or ``file`` with ``index,mass`` rows).
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise MeasureSpecError(f"measure spec needs a 'kind', got {spec!r}")
    kind = str(spec["kind"]).lower()
    if kind == "lebesgue":
        scale = float(spec.get("scale", 1.0))
        if scale < 0:
            raise MeasureSpecError("lebesgue scale must be nonnegative")
        support = spec.get("support")
        if support is not None:
            support = np.atleast_2d(np.asarray(support, dtype=float))
        mass = np.ones(())
        for a, b in enumerate(p.bounds):
            if support is None:
                w = np.diff(b)
            else:
                w = _interval_overlap(b, support[a][0], support[a][1])
            mass = np.multiply.outer(mass, w)
        return GridMeasure(p, scale * mass)
    if kind == "atom":
        at = np.atleast_1d(np.asarray(spec["at"], dtype=float))
        if at.size != p.ndim:
            raise MeasureSpecError(f"atom location {at.tolist()} has wrong dimension for a {p.ndim}-axis grid")
        mass = float(spec.get("mass", 1.0))
        if mass < 0:
            raise MeasureSpecError("atom mass must be nonnegative")
        out = np.zeros(p.shape)
        out[tuple(p.locate(float(x), a) for a, x in enumerate(at))] = mass
        return GridMeasure(p, out)
    if kind == "mixture":
        parts = spec.get("parts") or []
        if not parts:
            raise MeasureSpecError("mixture needs a nonempty 'parts' list")
        total = np.zeros(p.shape)
        for part in parts:
            total = total + bin_measure(part, p, base_dir).masses
        return GridMeasure(p, total)
    if kind == "cells":
        if "masses" in spec:
            m = np.asarray(spec["masses"], dtype=float)
        elif "file" in spec:
            path = Path(spec["file"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            m = _read_cell_file(path)
        else:
            raise MeasureSpecError("cells measure needs 'masses' or 'file'")
        if m.size != int(np.prod(p.shape)):
            raise MeasureSpecError(f"{m.size} tabulated masses for a grid with {int(np.prod(p.shape))} cells")
        return GridMeasure(p, m.reshape(p.shape))
    raise MeasureSpecError(f"unknown measure kind {kind!r}")


def binned_density(nu: GridMeasure, lam: GridMeasure) -> GridFunction:
    """Piecewise-constant density ``nu(cell) / lam(cell)``."""
    if nu.partition.shape != lam.partition.shape:
        raise ValueError("measures live on different partitions")
    if np.any(lam.masses <= 0):
        raise ValueError("base measure has a cell of zero mass")
    return GridFunction(nu.partition, nu.masses / lam.masses)


def plan_marginal(p, lam1: GridMeasure, lam2: GridMeasure, axis: int = 1) -> GridFunction:
    """Marginal density of a plan density on a product grid.

    ``axis=1``: ``m_i = sum_j p_ij lam2_j``; ``axis=2``: ``m_j = sum_i p_ij lam1_i``.
    """
    P = np.asarray(getattr(p, "values", p), dtype=float)
    if P.shape != (lam1.masses.size, lam2.masses.size):
        raise ValueError(f"plan shape {P.shape} does not match base measures")
    if axis == 1:
        return GridFunction(lam1.partition, P @ lam2.masses)
    if axis == 2:
        return GridFunction(lam2.partition, lam1.masses @ P)
    raise ValueError("axis must be 1 or 2")


def coarsen(values, lam, fine: GridPartition):
    """λ-weighted average of fine coefficients over the parent cells of ``fine``.

    Returns ``(coarse_values, coarse_lambda_masses)``.
    """
    if fine.parent_index is None:
        raise ValueError("partition has no parent linkage")
    v = np.asarray(values, dtype=float)
    w = np.asarray(getattr(lam, "masses", lam), dtype=float)
    shape = fine.parent.shape
    num = np.zeros(shape)
    den = np.zeros(shape)
    if fine.ndim == 1:
        np.add.at(num, fine.parent_index[0], v * w)
        np.add.at(den, fine.parent_index[0], w)
    else:
        grids = np.meshgrid(*fine.parent_index, indexing="ij")
        np.add.at(num, tuple(grids), v * w)
        np.add.at(den, tuple(grids), w)
    return num / den, den


# --- cost averaging -------------------------------------------------------------

def cell_quadrature(spec, p: GridPartition, order: int = 3, base_dir=None):
    """Per-cell quadrature for a 1-D measure spec: ``(nodes, weights, cell_index)``.

    Lebesgue parts use ``order``-point Gauss-Legendre per cell, atoms are exact
    point evaluations, tabulated cells fall back to the cell midpoint.
    """
    if p.ndim != 1:
        raise ValueError("cell quadrature is per axis")
    kind = str(spec.get("kind", "")).lower()
    b = p.bounds[0]
    if kind == "lebesgue":
        scale = float(spec.get("scale", 1.0))
        support = spec.get("support")
        lo, hi = b[:-1], b[1:]
        if support is not None:
            s = np.atleast_2d(np.asarray(support, dtype=float))[0]
            lo, hi = np.maximum(lo, s[0]), np.minimum(hi, s[1])
        hi = np.maximum(hi, lo)
        gx, gw = np.polynomial.legendre.leggauss(order)
        half = 0.5 * (hi - lo)
        nodes = (0.5 * (hi + lo))[:, None] + half[:, None] * gx[None, :]
        weights = scale * half[:, None] * gw[None, :]
        cells = np.repeat(np.arange(lo.size), order)
        keep = weights.ravel() > 0
        return nodes.ravel()[keep], weights.ravel()[keep], cells[keep]
    if kind == "atom":
        at = float(np.atleast_1d(spec["at"])[0])
        return np.array([at]), np.array([float(spec.get("mass", 1.0))]), np.array([p.locate(at)])
    if kind == "mixture":
        parts = [cell_quadrature(part, p, order, base_dir) for part in spec["parts"]]
        return tuple(np.concatenate(x) for x in zip(*parts))
    if kind == "cells":
        m = bin_measure(spec, p, base_dir).masses
        keep = m > 0
        return p.centers()[keep], m[keep], np.arange(m.size)[keep]
    raise MeasureSpecError(f"unknown measure kind {kind!r}")


_COSTS = {
    "sqeuclidean": lambda x, y: (x - y) ** 2,
    "abs": lambda x, y: np.abs(x - y),
    "zero": lambda x, y: np.zeros(np.broadcast(x, y).shape),
}


def cost_function(spec):
    """Pointwise cost ``c(x, y)`` for a builtin cost spec (``None`` for tabulated)."""
    kind = str(spec.get("kind", "")).lower()
    if kind in ("euclidean",):
        kind = "abs"
    if kind == "power":
        e = float(spec.get("exponent", 2.0))
        return lambda x, y: np.abs(x - y) ** e
    if kind in _COSTS:
        return _COSTS[kind]
    if kind == "table":
        return None
    raise MeasureSpecError(f"unknown cost kind {kind!r}")


def is_convex_1d_cost(spec) -> bool:
    kind = str(spec.get("kind", "")).lower()
    return kind in ("sqeuclidean", "abs", "euclidean", "zero") or (kind == "power" and float(spec.get("exponent", 2.0)) >= 1)


def _read_matrix(spec, base_dir):
    if "matrix" in spec:
        return np.asarray(spec["matrix"], dtype=float)
    path = Path(spec["file"])
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def cell_average_cost(spec, p: GridPartition, lam_specs, order: int = 3, base_dir=None) -> np.ndarray:
    """λ-weighted cell averages ``c_ij = (1/(lam1_i lam2_j)) int_{I_ij} c dλ``.

    ``lam_specs`` are the two per-axis base measure specs; the integral is a
    tensor product of their per-cell quadratures. A tabulated matrix is
    returned unchanged.
    """
    if p.ndim != 2:
        raise ValueError("cost averaging needs a 2-axis product partition")
    kind = str(spec.get("kind", "")).lower()
    if kind == "table":
        M = _read_matrix(spec, base_dir)
        if M.shape != p.shape:
            raise MeasureSpecError(f"cost table shape {M.shape} does not match grid {p.shape}")
        if np.any(np.isnan(M)) or np.any(M == -np.inf):
            raise MeasureSpecError("tabulated cost is unbounded below")
        if not np.all(np.isfinite(M)):
            raise MeasureSpecError("tabulated cost must be finite")
        return M
    c = cost_function(spec)
    x, wx, ix = cell_quadrature(lam_specs[0], p.axis(0), order, base_dir)
    y, wy, iy = cell_quadrature(lam_specs[1], p.axis(1), order, base_dir)
    m, n = p.shape
    # integrate against the y-rule first, then scatter over x cells
    vals = c(x[:, None], y[None, :]) * wy[None, :]
    by_col = np.zeros((x.size, n))
    np.add.at(by_col.T, iy, vals.T)
    total = np.zeros((m, n))
    np.add.at(total, ix, by_col * wx[:, None])
    mass1 = np.bincount(ix, weights=wx, minlength=m)
    mass2 = np.bincount(iy, weights=wy, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / np.outer(mass1, mass2)
    if not np.all(np.isfinite(out)):
        raise MeasureSpecError("cost average undefined on a zero-mass cell")
    return out


# --- mollification -----------------------------------------------------------------

def bump_kernel(delta: float, h: float) -> np.ndarray:
    """Sampled ``(1 - (x/delta)^2)^3`` at integer cell offsets, normalized to unit sum."""
    m_max = max(int(math.ceil(delta / h - 1e-12)) - 1, 0)
    x = np.arange(-m_max, m_max + 1) * h
    k = np.clip(1.0 - (x / delta) ** 2, 0.0, None) ** 3
    return k / k.sum()


def _kernel_for(kernel, delta, h):
    if callable(kernel):
        m_max = max(int(math.ceil(delta / h - 1e-12)) - 1, 0)
        x = np.arange(-m_max, m_max + 1) * h
        k = np.clip(np.asarray(kernel(x / delta), dtype=float), 0.0, None)
        if k.sum() <= 0:
            raise ValueError("kernel has no mass on the grid")
        return k / k.sum()
    if kernel in (None, "bump"):
        return bump_kernel(delta, h)
    raise ValueError(f"unknown kernel {kernel!r}")


def mollify(f: GridFunction, delta: float, kernel="bump", pad: bool = True):
    """Discrete convolution of a Lebesgue density with the scaled kernel.

    With ``pad=True`` the grid is extended by the kernel support on every axis
    (zero padding) so no mass is lost. With ``pad=False`` the result is
    truncated to the input grid and renormalized to the input mass. Returns
    ``(g, degenerate)``; ``degenerate`` is set when ``delta`` is below one cell
    width and ``f`` is returned unchanged.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    part = f.partition
    for a in range(part.ndim):
        if not part.is_uniform(a):
            raise ValueError("mollification needs uniform cells")
    hs = [float(part.widths(a)[0]) for a in range(part.ndim)]
    kernels = [_kernel_for(kernel, delta, h) for h in hs]
    if all(k.size == 1 for k in kernels):
        warnings.warn(f"mollifier width {delta} is below one cell; returning input unchanged", stacklevel=2)
        return f, True
    vals = f.values
    bounds = list(part.bounds)
    if pad:
        pads = [(k.size // 2, k.size // 2) for k in kernels]
        vals = np.pad(vals, pads)
        for a, (h, (lo_pad, _)) in enumerate(zip(hs, pads)):
            b = part.bounds[a]
            n = b.size - 1 + 2 * lo_pad
            bounds[a] = b[0] - lo_pad * h + h * np.arange(n + 1)
    out = vals
    for a, k in enumerate(kernels):
        out = convolve1d(out, k, axis=a, mode="constant", cval=0.0)
    vol = np.prod(hs)
    mass_in = float(f.values.sum()) * vol
    mass_out = float(out.sum()) * vol
    if mass_out > 0:
        out = out * (mass_in / mass_out)
    return GridFunction(GridPartition(tuple(bounds), level=part.level), out), False


def mollify_measure(nu: GridMeasure, delta: float, kernel="bump", pad: bool = True):
    """Mollify a measure given by cell masses on a uniform grid; returns ``(GridMeasure, degenerate)``."""
    vol = float(np.prod([nu.partition.widths(a)[0] for a in range(nu.partition.ndim)]))
    g, degenerate = mollify(GridFunction(nu.partition, nu.masses / vol), delta, kernel, pad)
    return GridMeasure(g.partition, np.clip(g.values, 0.0, None) * vol), degenerate


def partition_gap(A, p: GridPartition, nu: GridMeasure) -> float:
    """``nu(A+) - nu(A-)``: mass of cells meeting the box ``A`` minus cells inside it."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    inside = np.ones(p.shape, dtype=bool)
    meets = np.ones(p.shape, dtype=bool)
    for a, b in enumerate(p.bounds):
        lo, hi = A[a]
        ins = (b[:-1] >= lo) & (b[1:] <= hi)
        met = (b[:-1] < hi) & (b[1:] > lo)
        shape = [1] * p.ndim
        shape[a] = -1
        inside = inside & ins.reshape(shape)
        meets = meets & met.reshape(shape)
    return float(nu.masses[meets].sum() - nu.masses[inside].sum())
