"""Uniform-grid fields, finite differences, ball averages and norms.

Every other module works on the types defined here. Fields are sampled on the
nodes of a uniform rectilinear grid with the same spacing on every axis; a
node stands for the cube of volume ``h**n`` centred on it, so the measure of a
node set is ``count * h**n``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.fft

__all__ = [
    "DegenerateBallError",
    "Grid",
    "ScalarField",
    "VectorField",
    "RegionMask",
    "InequalitySides",
    "BallAverager",
    "set_workers",
    "multi_indices",
    "ball_offsets",
    "ball_nodes",
    "ball_average",
    "derivative",
    "gradient",
    "lp_norm",
    "sobolev_norm",
    "poincare_check",
    "unit_ball_volume",
]

MAX_DERIVATIVE_ORDER = 3

# Relative slack on squared radii so that nodes lying exactly on a sphere
# (r = 5h and the like) are counted regardless of rounding.
_RADIUS_SLACK = 1e-9

_WORKERS = 1


def set_workers(workers: int) -> None:
    """Cap the number of FFT workers used by every convolution in the package."""
    global _WORKERS
    if workers < 1:
        raise ValueError("workers must be >= 1")
    _WORKERS = int(workers)


def fft_workers() -> int:
    return _WORKERS


class DegenerateBallError(ValueError):
    """Raised when a ball is too small to contain a usable set of nodes."""


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


@dataclass(frozen=True)
class Grid:
    """Uniform grid on a box in R^n, n in {1, 2, 3}.

    Node ``i`` sits at ``origin + i * spacing``.
    """

    shape: tuple[int, ...]
    origin: tuple[float, ...]
    spacing: float

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", float(self.spacing))
        if len(shape) not in (1, 2, 3):
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if len(origin) != len(shape):
            raise ValueError("origin and shape must have the same length")
        if min(shape) < 4:
            raise ValueError(f"every axis needs at least 4 nodes, got shape {shape}")
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @classmethod
    def from_box(cls, lower: Sequence[float], upper: Sequence[float], nodes: int | Sequence[int]) -> "Grid":
        """Grid whose first and last nodes sit on the corners of ``[lower, upper]``.

        The extents divided by the cell counts must agree, since the spacing is
        shared by all axes.
        """
        lower = [float(v) for v in lower]
        upper = [float(v) for v in upper]
        if isinstance(nodes, (int, np.integer)):
            nodes = [int(nodes)] * len(lower)
        hs = [(u - lo) / (k - 1) for lo, u, k in zip(lower, upper, nodes)]
        if max(hs) - min(hs) > 1e-12 * max(hs):
            raise ValueError(f"box and node counts give unequal spacings {hs}")
        return cls(tuple(nodes), tuple(lower), hs[0])

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.shape) - 1)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def axes(self) -> list[np.ndarray]:
        return [o + self.spacing * np.arange(k) for o, k in zip(self.origin, self.shape)]

    def coordinates(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, n)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def node(self, index: Sequence[int]) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * np.asarray(index, dtype=float)

    def nearest_index(self, point: Sequence[float]) -> tuple[int, ...]:
        idx = np.rint((np.asarray(point, dtype=float) - self.lower) / self.spacing).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def contains_index(self, index: Sequence[int]) -> bool:
        return len(index) == self.dim and all(0 <= i < k for i, k in zip(index, self.shape))

    def header(self) -> dict:
        return {"dim": self.dim, "shape": list(self.shape), "origin": list(self.origin), "spacing": self.spacing}


def _check_index(grid: Grid, x: Sequence[int]) -> tuple[int, ...]:
    x = tuple(int(i) for i in x)
    if not grid.contains_index(x):
        raise IndexError(f"node {x} is outside grid of shape {grid.shape}")
    return x


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains non-finite values")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * c)

    __rmul__ = __mul__

    def abs(self) -> "ScalarField":
        return ScalarField(self.grid, np.abs(self.values))

    def at(self, index: Sequence[int]) -> float:
        return float(self.values[tuple(index)])


@dataclass(frozen=True, eq=False)
class VectorField:
    """``m`` values per node; the component index is the last (fastest) axis."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == self.grid.dim:
            values = values[..., None]
        if values.shape[:-1] != self.grid.shape or values.shape[-1] < 1:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("vector field contains non-finite values")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def components(self) -> int:
        return int(self.values.shape[-1])

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[..., i])


@dataclass(frozen=True, eq=False)
class RegionMask:
    grid: Grid
    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags)
        if flags.shape != self.grid.shape:
            raise ValueError(f"mask shape {flags.shape} does not match grid {self.grid.shape}")
        flags = flags.astype(bool, copy=True)
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @classmethod
    def full(cls, grid: Grid) -> "RegionMask":
        return cls(grid, np.ones(grid.shape, dtype=bool))

    @classmethod
    def empty(cls, grid: Grid) -> "RegionMask":
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    @classmethod
    def box(cls, grid: Grid, lower: Sequence[float], upper: Sequence[float], closed: bool = True) -> "RegionMask":
        """Nodes of ``grid`` inside the box; ``closed=False`` keeps the strict interior."""
        x = grid.coordinates()
        tol = 1e-9 * grid.spacing
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        if closed:
            inside = np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
        else:
            inside = np.all((x > lo + tol) & (x < hi - tol), axis=-1)
        return cls(grid, inside)

    @classmethod
    def ball(cls, grid: Grid, center: Sequence[float], radius: float) -> "RegionMask":
        d2 = np.sum((grid.coordinates() - np.asarray(center, dtype=float)) ** 2, axis=-1)
        return cls(grid, d2 <= radius**2 * (1 + _RADIUS_SLACK))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.flags))

    @property
    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    def is_empty(self) -> bool:
        return not self.flags.any()

    def _other(self, other: "RegionMask") -> np.ndarray:
        if other.grid != self.grid:
            raise ValueError("masks live on different grids")
        return other.flags

    def __and__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.grid, self.flags & self._other(other))

    def __or__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.grid, self.flags | self._other(other))

    def __sub__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.grid, self.flags & ~self._other(other))

    def __invert__(self) -> "RegionMask":
        return RegionMask(self.grid, ~self.flags)

    def issubset(self, other: "RegionMask") -> bool:
        return not np.any(self.flags & ~self._other(other))

    def __eq__(self, other):
        if not isinstance(other, RegionMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.flags, other.flags)

    __hash__ = None


class InequalitySides(NamedTuple):
    """Both sides of an inequality ``lhs <= C * rhs_unit`` with the constant stripped."""

    lhs: float
    rhs_unit: float

    @property
    def ratio(self) -> float:
        if self.rhs_unit == 0.0:
            return 0.0 if self.lhs == 0.0 else math.inf
        return self.lhs / self.rhs_unit


def multi_indices(n: int, order: int) -> list[tuple[int, ...]]:
    """All multi-indices of length ``n`` and total order ``order``, lexicographically descending."""
    out = []
    for combo in itertools.combinations_with_replacement(range(n), order):
        alpha = [0] * n
        for axis in combo:
            alpha[axis] += 1
        out.append(tuple(alpha))
    return out


def ball_offsets(n: int, radius_nodes: float, limit: Sequence[int] | None = None) -> np.ndarray:
    """Integer offsets ``o`` with ``|o| <= radius_nodes``, in flat (row-major) order.

    ``limit`` clips each axis to ``|o_i| <= limit_i``; offsets beyond the box
    extent can never hit a node.
    """
    R = int(math.floor(radius_nodes * (1 + _RADIUS_SLACK)))
    spans = []
    for i in range(n):
        Ri = R if limit is None else min(R, int(limit[i]))
        spans.append(np.arange(-Ri, Ri + 1))
    mesh = np.stack(np.meshgrid(*spans, indexing="ij"), axis=-1).reshape(-1, n)
    keep = np.sum(mesh.astype(float) ** 2, axis=1) <= radius_nodes**2 * (1 + _RADIUS_SLACK)
    return mesh[keep]


def ball_nodes(grid: Grid, x: Sequence[int], r: float) -> np.ndarray:
    """Indices (k, n) of nodes of ``grid`` within distance ``r`` of node ``x``, flat order."""
    x = _check_index(grid, x)
    if r < grid.spacing * (1 - _RADIUS_SLACK):
        raise DegenerateBallError(f"degenerate ball: radius {r} is below the spacing {grid.spacing}")
    offs = ball_offsets(grid.dim, r / grid.spacing, limit=[k - 1 for k in grid.shape])
    idx = offs + np.asarray(x)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.shape)), axis=1)
    idx = idx[inside]
    if len(idx) == 0:
        raise DegenerateBallError("degenerate ball: no node inside")
    return idx


def ball_average(f: ScalarField, x: Sequence[int], r: float) -> float:
    """Node-sampled mean of ``f`` over ``B(x, r)`` intersected with the grid box.

    The sum is exactly rounded (``math.fsum``), so the result does not depend
    on summation order and is monotone in ``f``.
    """
    idx = ball_nodes(f.grid, x, r)
    vals = f.values[tuple(idx.T)]
    return math.fsum(vals.tolist()) / len(vals)


class BallAverager:
    """Ball averages of one field at every node, for many radii.

    The padded FFT of the field and of the indicator of the grid box are
    computed once; each radius then costs one stencil transform and two
    inverse transforms. Balls are truncated at the box boundary, i.e. the
    result is ``sum(f over B(x,r) ∩ box) / count(B(x,r) ∩ box)``.
    """

    def __init__(self, grid: Grid, values: np.ndarray):
        self.grid = grid
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise ValueError("values do not match grid")
        self._limit = [k - 1 for k in grid.shape]
        self._fft_shape = tuple(scipy.fft.next_fast_len(3 * k - 2, real=True) for k in grid.shape)
        axes = tuple(range(grid.dim))
        w = fft_workers()
        self._values_hat = scipy.fft.rfftn(values, s=self._fft_shape, axes=axes, workers=w)
        self._ones_hat = scipy.fft.rfftn(np.ones(grid.shape), s=self._fft_shape, axes=axes, workers=w)
        self._values = values

    def average(self, r: float) -> np.ndarray:
        grid = self.grid
        if r < grid.spacing * (1 - _RADIUS_SLACK):
            raise DegenerateBallError(f"degenerate ball: radius {r} is below the spacing {grid.spacing}")
        offs = ball_offsets(grid.dim, r / grid.spacing, limit=self._limit)
        # Stencil placed with its centre at index 0 (negative offsets wrap); the
        # padding of 2(k-1) per axis keeps the circular convolution linear.
        stencil = np.zeros(self._fft_shape)
        stencil[tuple((offs % np.asarray(self._fft_shape)).T)] = 1.0
        axes = tuple(range(grid.dim))
        w = fft_workers()
        s_hat = scipy.fft.rfftn(stencil, axes=axes, workers=w)
        sums = scipy.fft.irfftn(self._values_hat * s_hat, s=self._fft_shape, axes=axes, workers=w)
        counts = scipy.fft.irfftn(self._ones_hat * s_hat, s=self._fft_shape, axes=axes, workers=w)
        window = tuple(slice(0, k) for k in grid.shape)
        return sums[window] / np.rint(counts[window])


def derivative(f: ScalarField, alpha: Sequence[int]) -> ScalarField:
    """Finite-difference approximation of ``D^alpha f``.

    Each unit of ``alpha`` applies one second-order first-derivative stencil:
    central in the interior, one-sided second order on the two boundary
    layers. Exact on affine fields, and on quadratics for ``|alpha| <= 2``.
    """
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != f.grid.dim or min(alpha) < 0:
        raise ValueError(f"multi-index {alpha} does not fit a {f.grid.dim}-D grid")
    if sum(alpha) > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"derivative order {sum(alpha)} exceeds supported order {MAX_DERIVATIVE_ORDER}")
    v = np.array(f.values)
    for axis, a in enumerate(alpha):
        for _ in range(a):
            v = np.gradient(v, f.grid.spacing, axis=axis, edge_order=2)
    return ScalarField(f.grid, v)


def gradient(f: ScalarField) -> VectorField:
    n = f.grid.dim
    comps = [derivative(f, tuple(int(i == j) for j in range(n))).values for i in range(n)]
    return VectorField(f.grid, np.stack(comps, axis=-1))


def _mask_flags(f_grid: Grid, mask: RegionMask | None) -> np.ndarray | None:
    if mask is None:
        return None
    if mask.grid != f_grid:
        raise ValueError("mask and field live on different grids")
    return mask.flags


def lp_norm(f: ScalarField, p: float, mask: RegionMask | None = None) -> float:
    """``(sum over mask of |f|^p h^n)^(1/p)``."""
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    a = np.abs(f.values) ** p
    flags = _mask_flags(f.grid, mask)
    if flags is not None:
        a = np.where(flags, a, 0.0)
    return float(np.sum(a) * f.grid.cell_volume) ** (1.0 / p)


def sobolev_norm(f: ScalarField, k: int, p: float, mask: RegionMask | None = None) -> float:
    """``(sum over |alpha| <= k of ||D^alpha f||_p^p)^(1/p)``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    total = 0.0
    for order in range(k + 1):
        for alpha in multi_indices(f.grid.dim, order):
            total += lp_norm(derivative(f, alpha), p, mask) ** p
    return total ** (1.0 / p)


def poincare_check(f: ScalarField, x: Sequence[int], r: float) -> InequalitySides:
    """Mean oscillation of ``f`` on ``B(x, r)`` against ``r`` times the mean of ``|grad f|``."""
    idx = ball_nodes(f.grid, x, r)
    sel = tuple(idx.T)
    vals = f.values[sel]
    mean = math.fsum(vals.tolist()) / len(vals)
    lhs = math.fsum(np.abs(vals - mean).tolist()) / len(vals)
    gmag = np.sqrt(np.sum(gradient(f).values ** 2, axis=-1))[sel]
    rhs_unit = r * math.fsum(gmag.tolist()) / len(vals)
    return InequalitySides(lhs, rhs_unit)

