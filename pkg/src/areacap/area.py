"""Both sides of the area formula ``∫ f |J_phi| dx = ∫ N_f(y) dy``.

Each node stands for its cell ``x_i + [-h/2, h/2]^n``. The left side is the
midpoint sum of ``f |J|`` over the masked nodes. For the right side ``phi``
is extended by one linearly extrapolated ghost layer and interpolated
multilinearly on the lattice of nodes plus the outer half-cell faces, so the
interpolant covers exactly the union of node cells. Preimages of every sample
``y`` of a cell-centred grid are located per source cell (sign changes in
1-D, bilinear quadrisection in 2-D), and a preimage counts toward a mask when
its nearest node is in the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .grid import Grid, RegionMask, ScalarField, VectorField, derivative

__all__ = [
    "MappingProblem",
    "AreaFormulaReport",
    "YGrid",
    "Preimages",
    "jacobian",
    "lhs_integral",
    "multiplicity",
    "preimages",
    "rhs_integral",
    "verify_area_formula",
]


def jacobian(phi: VectorField) -> ScalarField:
    """``det D phi`` from the finite-difference derivative matrix at each node."""
    n = phi.grid.dim
    if phi.components != n:
        raise ValueError(f"the Jacobian needs m = n, got m = {phi.components}, n = {n}")
    D = np.empty(phi.grid.shape + (n, n))
    for i in range(n):
        comp = phi.component(i)
        for j in range(n):
            D[..., i, j] = derivative(comp, tuple(int(a == j) for a in range(n))).values
    if n == 1:
        det = D[..., 0, 0]
    elif n == 2:
        det = D[..., 0, 0] * D[..., 1, 1] - D[..., 0, 1] * D[..., 1, 0]
    else:
        det = np.linalg.det(D)
    return ScalarField(phi.grid, det)


@dataclass(eq=False)
class MappingProblem:
    """A map ``phi`` with weight ``f >= 0`` on domain ``A``, minus a removed set ``S``.

    ``exhaustion``, when given, is a nondecreasing list of masks inside ``A``.
    """

    phi: VectorField
    weight: ScalarField | None = None
    domain: RegionMask | None = None
    removed: RegionMask | None = None
    exhaustion: list[RegionMask] | None = None

    def __post_init__(self):
        grid = self.phi.grid
        if self.phi.components != grid.dim:
            raise ValueError("phi must map R^n to R^n")
        if self.weight is None:
            self.weight = ScalarField(grid, np.ones(grid.shape))
        if self.domain is None:
            self.domain = RegionMask.full(grid)
        if self.removed is None:
            self.removed = RegionMask.empty(grid)
        for name, obj in (("weight", self.weight), ("domain", self.domain), ("removed", self.removed)):
            if obj.grid != grid:
                raise ValueError(f"{name} lives on a different grid than phi")
        if np.any(self.weight.values[self.domain.flags] < 0):
            raise ValueError("the weight must be nonnegative on the domain")
        if self.exhaustion is not None:
            prev = None
            for m in self.exhaustion:
                if m.grid != grid:
                    raise ValueError("exhaustion mask lives on a different grid")
                if not m.issubset(self.domain):
                    raise ValueError("exhaustion masks must lie inside the domain")
                if prev is not None and not prev.issubset(m):
                    raise ValueError("exhaustion masks must be nondecreasing")
                prev = m

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    @property
    def effective(self) -> RegionMask:
        return self.domain - self.removed


def lhs_integral(prob: MappingProblem, mask: RegionMask | None = None, J: ScalarField | None = None) -> float:
    """``sum over mask of f |J| h^n``, exactly rounded."""
    mask = prob.effective if mask is None else mask
    J = jacobian(prob.phi) if J is None else J
    terms = np.where(mask.flags, prob.weight.values * np.abs(J.values), 0.0) * prob.grid.cell_volume
    return math.fsum(terms.ravel().tolist())


# ---------------------------------------------------------------- interpolation lattice


def _extended_lattice(values: np.ndarray, dim: int, extrapolate: bool) -> np.ndarray:
    """Values on nodes plus outer half-cell faces: shape ``shape + 2`` per axis.

    The ghost layer is linear extrapolation (``extrapolate``) or a copy of the
    boundary layer; a face value is the mean of the boundary and ghost values.
    """
    out = values
    for axis in range(dim):
        first = np.take(out, [0], axis=axis)
        second = np.take(out, [1], axis=axis)
        last = np.take(out, [-1], axis=axis)
        before = np.take(out, [-2], axis=axis)
        if extrapolate:
            ghost_lo, ghost_hi = 2 * first - second, 2 * last - before
        else:
            ghost_lo, ghost_hi = first, last
        out = np.concatenate([(first + ghost_lo) / 2, out, (last + ghost_hi) / 2], axis=axis)
    return out


def _lattice_axes(grid: Grid) -> list[np.ndarray]:
    h = grid.spacing
    axes = []
    for ax in grid.axes():
        axes.append(np.concatenate([[ax[0] - h / 2], ax, [ax[-1] + h / 2]]))
    return axes


@dataclass(frozen=True)
class YGrid:
    """Cell-centred sample grid over the image bounding box with one margin cell per side."""

    lower: tuple[float, ...]
    spacing: tuple[float, ...]
    counts: tuple[int, ...]

    @classmethod
    def covering(cls, lo: np.ndarray, hi: np.ndarray, hy: float) -> "YGrid":
        if not hy > 0:
            raise ValueError("hy must be positive")
        lower, spacing, counts = [], [], []
        for a, b in zip(lo, hi):
            extent = float(b - a)
            if extent == 0.0:
                # a flat image axis: put the middle sample on the value itself
                lower.append(float(a) - 1.5 * hy)
                spacing.append(hy)
                counts.append(3)
                continue
            c = max(1, int(math.ceil(extent / hy - 1e-9)))
            s = extent / c
            lower.append(float(a) - s)
            spacing.append(s)
            counts.append(c + 2)
        return cls(tuple(lower), tuple(spacing), tuple(counts))

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(c) + 0.5) * s for lo, s, c in zip(self.lower, self.spacing, self.counts)]

    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1).reshape(-1, self.dim)

    def record(self) -> dict:
        return {"lower": list(self.lower), "spacing": list(self.spacing), "counts": list(self.counts)}


@dataclass(eq=False)
class Preimages:
    """Merged preimages: sample index, source position, interpolated weight and nearest node (flat)."""

    sample: np.ndarray
    position: np.ndarray
    weight: np.ndarray
    node: np.ndarray
    samples: int
    degenerate: np.ndarray  # sample indices with a continuum of preimages

    def multiplicity(self, mask: RegionMask | None = None, weighted: bool = True) -> np.ndarray:
        """``N_f`` at every sample, counting preimages whose nearest node is in ``mask``."""
        keep = np.ones(len(self.sample), dtype=bool) if mask is None else mask.flags.reshape(-1)[self.node]
        w = self.weight if weighted else np.ones(len(self.sample))
        return np.bincount(self.sample, weights=np.where(keep, w, 0.0), minlength=self.samples)


def _nearest_node(grid: Grid, pos: np.ndarray) -> np.ndarray:
    idx = np.rint((pos - grid.lower) / grid.spacing).astype(np.int64)
    idx = np.clip(idx, 0, np.asarray(grid.shape) - 1)
    return np.ravel_multi_index(tuple(idx.T), grid.shape)


def _interp_weight(fl: np.ndarray, axes: list[np.ndarray], pos: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of lattice values ``fl`` at positions ``pos``."""
    interp = RegularGridInterpolator(tuple(axes), fl, method="linear", bounds_error=False, fill_value=None)
    return interp(pos)


def _expand_ranges(starts: np.ndarray, stops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Owner index and value for every integer in ``[start, stop)`` of each range."""
    counts = np.maximum(stops - starts, 0)
    owner = np.repeat(np.arange(len(starts)), counts)
    if len(owner) == 0:
        return owner, owner
    offsets = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, starts[owner] + offsets


def _preimages_1d(grid, phil, fl, axes, ys):
    x = axes[0]
    p = phil[:, 0]
    y = ys[:, 0]
    order = np.argsort(y, kind="stable")
    ysorted = y[order]
    a_all, b_all = p[:-1], p[1:]
    lo = np.minimum(a_all, b_all)
    hi = np.maximum(a_all, b_all)
    i0 = np.searchsorted(ysorted, lo, side="left")
    i1 = np.searchsorted(ysorted, hi, side="right")
    cell, pos = _expand_ranges(i0, i1)
    sample = order[pos]
    a = a_all[cell] - y[sample]
    b = b_all[cell] - y[sample]
    degenerate = (a == 0) & (b == 0)
    hit = ((a == 0) | (a * b < 0)) & ~degenerate
    # closed right end of the last cell
    last = len(p) - 2
    end_hit = (cell == last) & (b == 0) & ~degenerate
    cell_h, a_h, b_h, s_h = cell[hit], a[hit], b[hit], sample[hit]
    t = np.where(a_h == 0, 0.0, a_h / np.where(a_h == b_h, 1.0, a_h - b_h))
    xr = x[cell_h] + t * (x[cell_h + 1] - x[cell_h])
    xr = np.concatenate([xr, np.full(int(end_hit.sum()), x[-1])])
    s_all = np.concatenate([s_h, sample[end_hit]])
    order2 = np.lexsort((xr, s_all))
    xr, s_all = xr[order2], s_all[order2]
    pos = xr[:, None]
    w = np.interp(xr, x, fl)
    return s_all, pos, w, np.unique(sample[degenerate])


def _bilinear(P, u, v):
    """``P``: corner values (k, 4, 2) ordered 00, 10, 01, 11; u, v: (k,) or (k, m)."""
    if u.ndim == 2:
        P = P[:, None]
        u = u[..., None]
        v = v[..., None]
    else:
        u = u[:, None]
        v = v[:, None]
    return (
        (1 - u) * (1 - v) * P[..., 0, :]
        + u * (1 - v) * P[..., 1, :]
        + (1 - u) * v * P[..., 2, :]
        + u * v * P[..., 3, :]
    )


def _preimages_2d(grid, phil, fl, axes, ys, floor, merge_radius, chunk=2_000_000):
    ax0, ax1 = axes
    n0, n1 = len(ax0) - 1, len(ax1) - 1
    c00 = phil[:-1, :-1].reshape(-1, 2)
    c10 = phil[1:, :-1].reshape(-1, 2)
    c01 = phil[:-1, 1:].reshape(-1, 2)
    c11 = phil[1:, 1:].reshape(-1, 2)
    corners = np.stack([c00, c10, c01, c11], axis=1)  # (cells, 4, 2)
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    width0 = np.repeat(np.diff(ax0), n1)
    width1 = np.tile(np.diff(ax1), n0)
    base0 = np.repeat(ax0[:-1], n1)
    base1 = np.tile(ax1[:-1], n0)

    # samples form a tensor grid: candidate pairs per cell from index ranges
    yaxes = [np.unique(ys[:, 0]), np.unique(ys[:, 1])]
    counts = (len(yaxes[0]), len(yaxes[1]))
    i0 = np.searchsorted(yaxes[0], lo[:, 0], side="left")
    i1 = np.searchsorted(yaxes[0], hi[:, 0], side="right")
    j0 = np.searchsorted(yaxes[1], lo[:, 1], side="left")
    j1 = np.searchsorted(yaxes[1], hi[:, 1], side="right")
    span1 = np.maximum(j1 - j0, 0)
    owner, flat = _expand_ranges(i0 * 0, (i1 - i0) * span1)
    cell = owner
    yi = i0[cell] + flat // np.maximum(span1[cell], 1)
    yj = j0[cell] + flat % np.maximum(span1[cell], 1)
    sample = yi * counts[1] + yj
    yv = np.stack([yaxes[0][yi], yaxes[1][yj]], axis=1)

    # a component constant on the cell and equal to y leaves a curve of preimages
    zero_w = (hi[cell] == lo[cell]) & (yv == lo[cell])
    degenerate = zero_w.any(axis=1)
    degenerate_samples = np.unique(sample[degenerate])
    keep = ~degenerate
    cell, sample, yv = cell[keep], sample[keep], yv[keep]
    u0 = np.zeros(len(cell))
    u1 = np.ones(len(cell))
    v0 = np.zeros(len(cell))
    v1 = np.ones(len(cell))

    target = floor * grid.spacing
    diam = np.hypot(width0[cell], width1[cell])
    while len(cell) and np.any(diam > target):
        done = diam <= target
        fin = [arr[done] for arr in (cell, sample, yv, u0, u1, v0, v1)]
        act = [arr[~done] for arr in (cell, sample, yv, u0, u1, v0, v1)]
        parts = [fin]
        c, s, yy, a0, a1, b0, b1 = act
        for start in range(0, len(c), chunk):
            sl = slice(start, start + chunk)
            cc, ss, yq = c[sl], s[sl], yy[sl]
            am, bm = (a0[sl] + a1[sl]) / 2, (b0[sl] + b1[sl]) / 2
            us = np.stack([a0[sl], am, a1[sl]], axis=1)
            vs = np.stack([b0[sl], bm, b1[sl]], axis=1)
            U = np.repeat(us, 3, axis=1)
            V = np.tile(vs, (1, 3))
            vals = _bilinear(corners[cc], U, V).reshape(len(cc), 3, 3, 2)
            for du in (0, 1):
                for dv in (0, 1):
                    quad = vals[:, du : du + 2, dv : dv + 2, :].reshape(len(cc), 4, 2)
                    inside = np.all((quad.min(axis=1) <= yq) & (yq <= quad.max(axis=1)), axis=1)
                    parts.append(
                        [
                            cc[inside],
                            ss[inside],
                            yq[inside],
                            us[inside, du],
                            us[inside, du + 1],
                            vs[inside, dv],
                            vs[inside, dv + 1],
                        ]
                    )
        cell, sample, yv, u0, u1, v0, v1 = (np.concatenate([p[i] for p in parts]) for i in range(7))
        diam = np.hypot((u1 - u0) * width0[cell], (v1 - v0) * width1[cell])

    um, vm = (u0 + u1) / 2, (v0 + v1) / 2
    pos = np.stack([base0[cell] + um * width0[cell], base1[cell] + vm * width1[cell]], axis=1)
    if len(pos) == 0:
        return sample, pos, np.zeros(0), degenerate_samples
    # merge leaves of the same sample lying within merge_radius
    order = np.lexsort((pos[:, 1], pos[:, 0], sample))
    sample, pos = sample[order], pos[order]
    spread = 4.0 * (grid.diameter + merge_radius)
    lifted = np.column_stack([pos, sample.astype(float) * spread])
    pairs = cKDTree(lifted).query_pairs(merge_radius, output_type="ndarray")
    k = len(pos)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k)) if len(pairs) else coo_matrix((k, k))
    ncomp, label = connected_components(graph, directed=False)
    # components are labelled in order of their first member, so labels follow (sample, x) order
    size = np.bincount(label, minlength=ncomp)
    centre = np.stack([np.bincount(label, weights=pos[:, d], minlength=ncomp) / size for d in range(2)], axis=1)
    first = np.full(ncomp, k)
    np.minimum.at(first, label, np.arange(k))
    root_sample = sample[first]
    w = _interp_weight(fl, axes, centre)
    return root_sample, centre, w, degenerate_samples


def preimages(prob: MappingProblem, ygrid: YGrid | np.ndarray, floor: float = 1e-3,
              merge_radius: float | None = None) -> Preimages:
    """Preimages of every sample point under the interpolated ``phi``.

    ``ygrid`` is a :class:`YGrid` or an array of points (k, n). In 2-D arbitrary
    point arrays are handled one point at a time.
    """
    grid = prob.grid
    n = grid.dim
    if n not in (1, 2):
        raise ValueError("preimage counting is implemented for n = 1 and n = 2")
    merge_radius = grid.spacing / 4 if merge_radius is None else float(merge_radius)
    phil = _extended_lattice(prob.phi.values, n, extrapolate=True)
    fl = _extended_lattice(prob.weight.values, n, extrapolate=False)
    axes = _lattice_axes(grid)
    if isinstance(ygrid, YGrid):
        ys = ygrid.points()
        groups = [ys]
    else:
        ys = np.atleast_2d(np.asarray(ygrid, dtype=float))
        groups = [ys] if n == 1 else [ys[i : i + 1] for i in range(len(ys))]
    samples, positions, weights, degenerate = [], [], [], []
    offset = 0
    for g in groups:
        if n == 1:
            s, pos, w, deg = _preimages_1d(grid, phil, fl, axes, g)
        else:
            s, pos, w, deg = _preimages_2d(grid, phil, fl, axes, g, floor, merge_radius)
        samples.append(s + offset)
        positions.append(pos)
        weights.append(w)
        degenerate.append(deg + offset)
        offset += len(g)
    pos = np.concatenate(positions) if positions else np.zeros((0, n))
    pos = pos.reshape(-1, n)
    return Preimages(
        sample=np.concatenate(samples).astype(np.int64),
        position=pos,
        weight=np.concatenate(weights),
        node=_nearest_node(grid, pos) if len(pos) else np.zeros(0, dtype=np.int64),
        samples=len(ys),
        degenerate=np.concatenate(degenerate).astype(np.int64),
    )


def multiplicity(prob: MappingProblem, y: Sequence[float], mask: RegionMask | None = None, **kwargs) -> float:
    """``N_f(y)``: the sum of ``f`` over preimages of ``y`` whose nearest node is in ``mask``."""
    mask = prob.effective if mask is None else mask
    pre = preimages(prob, np.asarray(y, dtype=float).reshape(1, -1), **kwargs)
    if len(pre.degenerate):
        raise ValueError(f"degenerate fiber: phi is constant at {list(y)} on a whole cell")
    return float(pre.multiplicity(mask)[0])


def image_bounds(prob: MappingProblem) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of the interpolated image of the node cells."""
    n = prob.grid.dim
    phil = _extended_lattice(prob.phi.values, n, extrapolate=True).reshape(-1, n)
    return phil.min(axis=0), phil.max(axis=0)


def y_grid(prob: MappingProblem, hy: float | None = None) -> YGrid:
    lo, hi = image_bounds(prob)
    return YGrid.covering(lo, hi, prob.grid.spacing if hy is None else hy)


def rhs_integral(prob: MappingProblem, hy: float | None = None, mask: RegionMask | None = None, **kwargs) -> float:
    """``sum over y samples of N_f(y) h_y^n``."""
    mask = prob.effective if mask is None else mask
    yg = y_grid(prob, hy)
    pre = preimages(prob, yg, **kwargs)
    return math.fsum(pre.multiplicity(mask).tolist()) * yg.cell_volume


@dataclass
class AreaFormulaReport:
    lhs: float
    rhs: float
    abs_error: float
    rel_error: float
    hy: float
    y_grid: YGrid
    histogram: dict[int, int]
    degenerate_samples: int
    valid: bool
    merge_radius: float
    subdivision_floor: float
    removed_nodes: int
    partial_lhs: list[float] = field(default_factory=list)
    partial_rhs: list[float] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "hy": self.hy,
            "y_grid": self.y_grid.record(),
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "degenerate_samples": self.degenerate_samples,
            "valid": self.valid,
            "merge_radius": self.merge_radius,
            "subdivision_floor": self.subdivision_floor,
            "removed_nodes": self.removed_nodes,
            "partial_lhs": self.partial_lhs,
            "partial_rhs": self.partial_rhs,
        }


def verify_area_formula(prob: MappingProblem, hy: float | None = None, floor: float = 1e-3,
                        merge_radius: float | None = None) -> AreaFormulaReport:
    """Both sides over ``A \\ S``, plus partial sums over the exhaustion masks if any."""
    grid = prob.grid
    merge_radius = grid.spacing / 4 if merge_radius is None else float(merge_radius)
    hy = grid.spacing if hy is None else float(hy)
    J = jacobian(prob.phi)
    mask = prob.effective
    yg = y_grid(prob, hy)
    pre = preimages(prob, yg, floor=floor, merge_radius=merge_radius)
    vol_y = yg.cell_volume

    def rhs_for(m: RegionMask) -> float:
        return math.fsum(pre.multiplicity(m).tolist()) * vol_y

    lhs = lhs_integral(prob, mask, J)
    rhs = rhs_for(mask)
    counts = pre.multiplicity(mask, weighted=False).astype(np.int64)
    values, freq = np.unique(counts, return_counts=True)
    histogram = {int(v): int(c) for v, c in zip(values, freq)}
    partial_lhs, partial_rhs = [], []
    for m in prob.exhaustion or []:
        m_eff = m - prob.removed
        partial_lhs.append(lhs_integral(prob, m_eff, J))
        partial_rhs.append(rhs_for(m_eff))
    abs_error = abs(lhs - rhs)
    rel_error = abs_error / max(lhs, rhs, 1e-300)
    degenerate = len(pre.degenerate)
    return AreaFormulaReport(
        lhs=lhs,
        rhs=rhs,
        abs_error=abs_error,
        rel_error=rel_error,
        hy=hy,
        y_grid=yg,
        histogram=histogram,
        degenerate_samples=degenerate,
        valid=degenerate <= 0.01 * yg.size,
        merge_radius=merge_radius,
        subdivision_floor=floor,
        removed_nodes=prob.removed.count,
        partial_lhs=partial_lhs,
        partial_rhs=partial_rhs,
    )
