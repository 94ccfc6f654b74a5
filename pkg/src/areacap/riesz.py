"""Riesz kernels and potentials on a grid.

The kernel ``I_alpha(x) = |x|**(alpha - n) / gamma(alpha)`` is summed against
node values with weight ``h**n``. The node at distance zero uses the exact
integral of the radial power over the ball of volume ``h**n`` centred on it,
which is finite whenever ``n + exponent > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.fft

from .grid import (
    Grid,
    InequalitySides,
    RegionMask,
    ScalarField,
    ball_nodes,
    derivative,
    fft_workers,
    multi_indices,
    unit_ball_volume,
)

__all__ = [
    "KernelSpec",
    "kernel_value",
    "self_cell_weight",
    "radial_weights",
    "riesz_potential",
    "riesz_potential_at",
    "derivative_aggregate",
    "bad_point_potential",
    "bad_point_mask",
    "telescoping_identity_check",
    "kernel_inequality_check",
]


def riesz_gamma(alpha: float, n: int) -> float:
    """Normalisation ``pi^(n/2) 2^alpha Gamma(alpha/2) / Gamma((n - alpha)/2)``."""
    return math.pi ** (n / 2) * 2.0**alpha * math.gamma(alpha / 2) / math.gamma((n - alpha) / 2)


@dataclass(frozen=True)
class KernelSpec:
    alpha: float
    n: int

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.n not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.n}")
        if not 0.0 < self.alpha < self.n:
            raise ValueError(f"kernel order must lie in (0, n) = (0, {self.n}), got {self.alpha}")

    @property
    def gamma(self) -> float:
        return riesz_gamma(self.alpha, self.n)

    @property
    def exponent(self) -> float:
        return self.alpha - self.n

    def check_exponent(self, p: float) -> None:
        if not self.alpha * p < self.n:
            raise ValueError(f"need alpha * p < n, got {self.alpha} * {p} >= {self.n}")

    def record(self) -> dict:
        return {"alpha": self.alpha, "n": self.n, "gamma": self.gamma}


def kernel_value(spec: KernelSpec, x: Sequence[float]) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (spec.n,):
        raise ValueError(f"expected a point in R^{spec.n}")
    r = float(np.linalg.norm(x))
    if r == 0.0:
        raise ValueError("kernel singularity at x = 0")
    return r**spec.exponent / spec.gamma


def self_cell_weight(n: int, h: float, exponent: float) -> float:
    """Integral of ``|y|**exponent`` over the centred ball of volume ``h**n``."""
    if not n + exponent > 0:
        raise ValueError(f"|y|^{exponent} is not integrable at 0 in dimension {n}")
    omega = unit_ball_volume(n)
    rho = h * omega ** (-1.0 / n)
    return n * omega * rho ** (n + exponent) / (n + exponent)


def radial_weights(grid: Grid, exponent: float, extent: Sequence[int] | None = None) -> np.ndarray:
    """Weights ``|o h|**exponent * h**n`` on offsets ``|o_i| <= extent_i``, centred array.

    The returned array has shape ``2 * extent + 1`` with the zero offset in
    the middle; that entry holds :func:`self_cell_weight`.
    """
    extent = [k - 1 for k in grid.shape] if extent is None else [int(e) for e in extent]
    h = grid.spacing
    axes = [h * np.arange(-e, e + 1) for e in extent]
    mesh = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(sum(m**2 for m in mesh))
    centre = tuple(extent)
    r[centre] = 1.0
    w = r**exponent * grid.cell_volume
    w[centre] = self_cell_weight(grid.dim, h, exponent)
    return w


def _kernel_stencil(grid: Grid, spec: KernelSpec) -> np.ndarray:
    if spec.n != grid.dim:
        raise ValueError(f"kernel is for R^{spec.n} but the grid is {grid.dim}-D")
    return radial_weights(grid, spec.exponent) / spec.gamma


def _potential_fft(values: np.ndarray, stencil: np.ndarray) -> np.ndarray:
    shape = values.shape
    fft_shape = tuple(scipy.fft.next_fast_len(a + b - 1, real=True) for a, b in zip(shape, stencil.shape))
    axes = tuple(range(len(shape)))
    w = fft_workers()
    prod = scipy.fft.rfftn(values, s=fft_shape, axes=axes, workers=w) * scipy.fft.rfftn(
        stencil, s=fft_shape, axes=axes, workers=w
    )
    full = scipy.fft.irfftn(prod, s=fft_shape, axes=axes, workers=w)
    window = tuple(slice(e, e + k) for e, k in zip((s // 2 for s in stencil.shape), shape))
    return full[window]


def _potential_direct(grid: Grid, values: np.ndarray, spec: KernelSpec, chunk: int = 2048) -> np.ndarray:
    flat = values.reshape(-1)
    src = np.flatnonzero(flat)
    out = np.zeros(grid.size)
    if len(src) == 0:
        return out.reshape(grid.shape)
    shape = np.asarray(grid.shape)
    src_idx = np.stack(np.unravel_index(src, grid.shape), axis=1)
    src_val = flat[src]
    h = grid.spacing
    w0 = self_cell_weight(grid.dim, h, spec.exponent)
    scale = grid.cell_volume / spec.gamma
    for start in range(0, grid.size, chunk):
        tgt = np.arange(start, min(start + chunk, grid.size))
        tgt_idx = np.stack(np.unravel_index(tgt, tuple(shape)), axis=1)
        d = (tgt_idx[:, None, :] - src_idx[None, :, :]).astype(float)
        r = np.sqrt(np.sum(d * d, axis=-1)) * h
        same = r == 0.0
        r[same] = 1.0
        k = r**spec.exponent * scale
        k[same] = w0 / spec.gamma
        out[tgt] = k @ src_val
    return out.reshape(grid.shape)


def riesz_potential(phi: ScalarField, spec: KernelSpec, method: str = "fft") -> ScalarField:
    """``(I_alpha * phi)(x) = sum_y I_alpha(x - y) phi(y) h^n`` at every node.

    ``method="direct"`` sums pairs explicitly and is the reference path;
    ``method="fft"`` convolves on a zero-padded grid and agrees with it to
    round-off.
    """
    if spec.n != phi.grid.dim:
        raise ValueError(f"kernel is for R^{spec.n} but the grid is {phi.grid.dim}-D")
    if method == "direct":
        return ScalarField(phi.grid, _potential_direct(phi.grid, phi.values, spec))
    if method == "fft":
        return ScalarField(phi.grid, _potential_fft(phi.values, _kernel_stencil(phi.grid, spec)))
    raise ValueError(f"unknown method {method!r}")


def riesz_potential_at(phi: ScalarField, spec: KernelSpec, x: Sequence[int]) -> float:
    """Potential at one node by direct summation in flat index order."""
    grid = phi.grid
    idx = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
    d = (idx - np.asarray(x)).astype(float)
    r = np.sqrt(np.sum(d * d, axis=1)) * grid.spacing
    same = r == 0.0
    r[same] = 1.0
    k = r**spec.exponent * grid.cell_volume
    k[same] = self_cell_weight(grid.dim, grid.spacing, spec.exponent)
    return float(np.dot(k, phi.values.reshape(-1)) / spec.gamma)


def derivative_aggregate(f: ScalarField, order: int) -> ScalarField:
    """``g = sum over |alpha| = order of |D^alpha f|``."""
    if not 0 <= order <= 3:
        raise ValueError(f"unsupported derivative order {order}")
    g = np.zeros(f.grid.shape)
    for alpha in multi_indices(f.grid.dim, order):
        g += np.abs(derivative(f, alpha).values)
    return ScalarField(f.grid, g)


def bad_point_potential(f: ScalarField, k: int, spec: KernelSpec, p: float | None = None) -> ScalarField:
    """``I_{k-1} * g`` with ``g`` the aggregate of the order ``k - 1`` derivatives of ``f``."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if abs(spec.alpha - (k - 1)) > 1e-12:
        raise ValueError(f"kernel order {spec.alpha} must equal k - 1 = {k - 1}")
    if p is not None:
        spec.check_exponent(p)
    return riesz_potential(derivative_aggregate(f, k - 1), spec)


def bad_point_mask(f: ScalarField, k: int, spec: KernelSpec, threshold: float,
                   p: float | None = None) -> RegionMask:
    """Nodes where ``I_{k-1} * g`` exceeds ``threshold``, the grid stand-in for ``= infinity``."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    pot = bad_point_potential(f, k, spec, p)
    return RegionMask(f.grid, pot.values > threshold)


class TelescopingResult(NamedTuple):
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def _inside_box(grid: Grid, x: Sequence[int], r: float) -> bool:
    p = grid.node(x)
    return bool(np.all(p - r >= grid.lower - 1e-12) and np.all(p + r <= grid.upper + 1e-12))


def telescoping_identity_check(f: ScalarField, x: Sequence[int], r: float, delta: float) -> TelescopingResult:
    """Both sides of the average-difference identity for ``B(x, delta) ⊂ B(x, r)``.

    lhs = r^-n ∫_{B_r} f - delta^-n ∫_{B_delta} f
    rhs = -(1/n) r^-n ∫_{B_r} g + (1/n) delta^-n ∫_{B_delta} g
          + (1/n) ∫_{B_r \\ B_delta} |y-x|^-n g,      g = grad f·(y-x)
    which follows from integrating d/drho of the scaled ball integral
    ``rho^-n ∫_{B_rho} f`` from delta to r. Each integral over a ball or the
    annulus is the region's exact volume times the node mean; both balls
    must lie inside the grid box.
    """
    grid = f.grid
    if not 0 < delta < r:
        raise ValueError("need 0 < delta < r")
    if not _inside_box(grid, x, r):
        raise ValueError("ball B(x, r) leaves the grid box")
    n = grid.dim
    idx_r = ball_nodes(grid, x, r)
    idx_d = ball_nodes(grid, x, delta)
    sel_r = tuple(idx_r.T)
    y = (idx_r - np.asarray(x)) * grid.spacing
    dist = np.sqrt(np.sum(y * y, axis=1))
    grad = np.stack([derivative(f, tuple(int(i == j) for j in range(n))).values[sel_r] for i in range(n)], axis=1)
    radial = np.sum(grad * y, axis=1)
    inner = dist <= delta * (1 + 1e-9)
    if inner.sum() != len(idx_d):
        raise RuntimeError("inner ball selection is inconsistent")
    fv = f.values[sel_r]
    fsum = math.fsum
    annulus = ~inner
    # Each region integral is its exact volume times the node mean, so the
    # ball terms cancel exactly on constants.
    omega = unit_ball_volume(n)
    v_r = omega * r**n / len(fv)
    v_d = omega * delta**n / int(inner.sum())
    v_a = omega * (r**n - delta**n) / int(annulus.sum())
    lhs = r**-n * fsum((fv * v_r).tolist()) - delta**-n * fsum((fv[inner] * v_d).tolist())
    rhs = (
        -r**-n * fsum((radial * v_r).tolist()) / n
        + delta**-n * fsum((radial[inner] * v_d).tolist()) / n
        + fsum((dist[annulus] ** -n * radial[annulus] * v_a).tolist()) / n
    )
    return TelescopingResult(lhs, rhs)


def kernel_inequality_check(f: ScalarField, k: int, ell: float, x: Sequence[int],
                            p: float | None = None) -> InequalitySides:
    """``∫|y-x|^(ell-n)|f|`` against ``sum over |alpha|=k of ∫|y-x|^(ell-n+k)|D^alpha f|``.

    ``f`` must vanish on the outermost node layer (compact support in the box).
    """
    grid = f.grid
    n = grid.dim
    if not 1 <= k <= 3:
        raise ValueError(f"unsupported derivative order {k}")
    if not ell > 0:
        raise ValueError("ell must be positive")
    if p is not None and not (k + ell - 1) * p < n:
        raise ValueError(f"need (k + ell - 1) p < n, got ({k} + {ell} - 1) * {p} >= {n}")
    edge = np.ones(grid.shape, dtype=bool)
    edge[tuple(slice(1, -1) for _ in range(n))] = False
    if np.any(f.values[edge] != 0.0):
        raise ValueError("f must vanish on the boundary layer of the grid")

    def weighted(values: np.ndarray, exponent: float) -> float:
        idx = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
        d = (idx - np.asarray(x)).astype(float)
        r = np.sqrt(np.sum(d * d, axis=1)) * grid.spacing
        same = r == 0.0
        r[same] = 1.0
        w = r**exponent * grid.cell_volume
        w[same] = self_cell_weight(n, grid.spacing, exponent)
        return math.fsum((w * np.abs(values.reshape(-1))).tolist())

    lhs = weighted(f.values, ell - n)
    rhs = 0.0
    for alpha in multi_indices(n, k):
        rhs += weighted(derivative(f, alpha).values, ell - n + k)
    return InequalitySides(lhs, rhs)
