"""Closed-form test fields: bumps, indicators, linear maps, folds and singular profiles."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .grid import Grid, ScalarField, VectorField

Field = ScalarField | VectorField


def make_grid(dim: int = 1, shape: int | Sequence[int] = 64, lower: float | Sequence[float] = -1.0,
              upper: float | Sequence[float] = 1.0) -> Grid:
    shape = [int(shape)] * dim if np.isscalar(shape) else [int(s) for s in shape]
    lower = [float(lower)] * dim if np.isscalar(lower) else [float(v) for v in lower]
    upper = [float(upper)] * dim if np.isscalar(upper) else [float(v) for v in upper]
    if not len(shape) == len(lower) == len(upper) == dim:
        raise ValueError("shape, lower and upper must all have dim entries")
    return Grid.from_box(lower, upper, shape)


def mollified_power(r: np.ndarray, exponent: float, core: float) -> np.ndarray:
    """``r**exponent`` for ``r >= core``; inside, the even quartic matching it to second order."""
    r = np.asarray(r, dtype=float)
    if core <= 0:
        with np.errstate(divide="ignore"):
            return r**exponent
    m, e = core, exponent
    g0 = m**e
    g1 = e * m ** (e - 1)
    g2 = e * (e - 1) * m ** (e - 2)
    c = (g2 - g1 / m) / (8 * m * m)
    b = g1 / (2 * m) - 2 * c * m * m
    a = g0 - b * m * m - c * m**4
    inner = a + b * r * r + c * r**4
    with np.errstate(divide="ignore"):
        outer = np.where(r >= m, r, m) ** e
    return np.where(r >= m, outer, inner)


def _radius(grid: Grid, center) -> np.ndarray:
    x = grid.coordinates()
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    return np.sqrt(np.sum((x - c) ** 2, axis=-1))


def bump(grid: Grid, center=None, radius: float = 0.5, amplitude: float = 1.0) -> ScalarField:
    """``amplitude * exp(1 - 1/(1 - |x - c|^2/R^2))`` inside the ball, 0 outside; peak ``amplitude``."""
    t = (_radius(grid, center) / radius) ** 2
    out = np.zeros(grid.shape)
    inside = t < 1
    out[inside] = amplitude * np.exp(1.0 - 1.0 / (1.0 - t[inside]))
    return ScalarField(grid, out)


def indicator(grid: Grid, lower: Sequence[float] | float = 0.0, upper: Sequence[float] | float = 1.0) -> ScalarField:
    """Indicator of the closed box ``[lower, upper]``."""
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (grid.dim,))
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (grid.dim,))
    x = grid.coordinates()
    tol = 1e-9 * grid.spacing
    inside = np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)
    return ScalarField(grid, inside.astype(float))


def heaviside(grid: Grid, at_zero: float = 0.5) -> ScalarField:
    """Indicator of ``x_1 > 0`` with the value ``at_zero`` on ``x_1 = 0``."""
    x = grid.coordinates()[..., 0]
    return ScalarField(grid, np.where(x > 0, 1.0, np.where(x < 0, 0.0, at_zero)))


def linear(grid: Grid, gradient: Sequence[float] | float = 1.0, offset: float = 0.0) -> ScalarField:
    a = np.broadcast_to(np.asarray(gradient, dtype=float), (grid.dim,))
    return ScalarField(grid, grid.coordinates() @ a + offset)


def identity_map(grid: Grid) -> VectorField:
    return VectorField(grid, grid.coordinates())


def linear_map(grid: Grid, matrix: Sequence[Sequence[float]] | float = 1.0,
               offset: Sequence[float] | float = 0.0) -> VectorField:
    M = np.asarray(matrix, dtype=float)
    if M.ndim == 0:
        M = M * np.eye(grid.dim)
    if M.shape != (grid.dim, grid.dim):
        raise ValueError(f"matrix must be {grid.dim}x{grid.dim}")
    b = np.broadcast_to(np.asarray(offset, dtype=float), (grid.dim,))
    return VectorField(grid, grid.coordinates() @ M.T + b)


def fold1d(grid: Grid) -> VectorField:
    """``x -> x^2``."""
    if grid.dim != 1:
        raise ValueError("fold1d needs a 1-D grid")
    return VectorField(grid, grid.coordinates() ** 2)


def fold2d(grid: Grid) -> VectorField:
    """``(x, y) -> (x^2, y)``."""
    if grid.dim != 2:
        raise ValueError("fold2d needs a 2-D grid")
    x = grid.coordinates()
    return VectorField(grid, np.stack([x[..., 0] ** 2, x[..., 1]], axis=-1))


def singular(grid: Grid, gamma: float = 0.5, mollify: float = 2.0, center=None, amplitude: float = 1.0) -> ScalarField:
    """``amplitude * |x - c|^gamma``, replaced by an even C^2 quartic inside radius ``mollify * h``."""
    r = _radius(grid, center)
    return ScalarField(grid, amplitude * mollified_power(r, gamma, mollify * grid.spacing))


def radial_singular_map(grid: Grid, gamma: float = 0.5, mollify: float = 2.0, center=None) -> VectorField:
    """``z -> (z - c) |z - c|^(gamma - 1)``, which sends radius ``r`` to ``r^gamma``.

    Inside radius ``mollify * h`` the factor ``|z|^(gamma - 1)`` is replaced by
    its C^2 even quartic continuation, which keeps the map smooth and injective
    for ``0 < gamma <= 1``.
    """
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    z = grid.coordinates() - c
    q = mollified_power(np.sqrt(np.sum(z * z, axis=-1)), gamma - 1.0, mollify * grid.spacing)
    return VectorField(grid, z * q[..., None])


def oscillatory(grid: Grid, center=None) -> ScalarField:
    """``sign(sin(1/|x - c|))``, with 0 at the centre."""
    r = _radius(grid, center)
    out = np.zeros(grid.shape)
    nz = r > 0
    out[nz] = np.sign(np.sin(1.0 / r[nz]))
    return ScalarField(grid, out)


def smooth_random(grid: Grid, seed: int = 0, terms: int = 6, width: float = 0.3,
                  cutoff: float | None = None) -> ScalarField:
    """Sum of ``terms`` Gaussians with random centres, widths and signed amplitudes.

    With ``cutoff`` set, the sum is multiplied by a bump of that radius so the
    field vanishes near the box boundary.
    """
    rng = np.random.default_rng(seed)
    lo, hi = grid.lower, grid.upper
    x = grid.coordinates()
    out = np.zeros(grid.shape)
    for _ in range(terms):
        c = lo + (hi - lo) * rng.uniform(0.2, 0.8, size=grid.dim)
        w = width * (hi - lo).max() * rng.uniform(0.5, 1.5)
        a = rng.uniform(-1.0, 1.0)
        out += a * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * w * w))
    if cutoff is not None:
        out *= bump(grid, center=(lo + hi) / 2, radius=cutoff).values
    return ScalarField(grid, out)


GRID_KEYS = ("dim", "shape", "lower", "upper")

BUILTINS: dict[str, Callable[..., Field]] = {
    "bump": bump,
    "indicator": indicator,
    "heaviside": heaviside,
    "linear": linear,
    "identity": identity_map,
    "linear_map": linear_map,
    "fold1d": fold1d,
    "fold2d": fold2d,
    "singular": singular,
    "radial_singular_map": radial_singular_map,
    "oscillatory": oscillatory,
    "smooth_random": smooth_random,
}


def generate(name: str, params: dict | None = None) -> Field:
    """Build the named builtin; grid keys ``dim, shape, lower, upper`` pick the grid."""
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin '{name}'; available: {', '.join(sorted(BUILTINS))}")
    params = dict(params or {})
    grid_args = {k: params.pop(k) for k in GRID_KEYS if k in params}
    grid = make_grid(**grid_args)
    return BUILTINS[name](grid, **params)


def mollification_error(gamma: float, grid: Grid, mollify: float, beyond: float) -> float:
    """Largest deviation of :func:`singular` from ``|x|^gamma`` outside radius ``beyond * h``."""
    r = _radius(grid, None)
    f = singular(grid, gamma, mollify).values
    far = r >= beyond * grid.spacing
    if not far.any():
        return 0.0
    return float(np.max(np.abs(f[far] - r[far] ** gamma)))


__all__ = ["BUILTINS", "generate", "make_grid", "mollified_power", "mollification_error"] + [
    f.__name__ for f in BUILTINS.values()
]
