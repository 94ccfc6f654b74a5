"""Hardy-Littlewood maximal function on a geometric radius ladder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import BallAverager, Grid, RegionMask, ScalarField, VectorField, ball_average

DEFAULT_RATIO = 2.0 ** 0.25


@dataclass(frozen=True)
class RadiusLadder:
    """Strictly increasing radii ``r_1 * ratio**i`` used in place of ``sup over r > 0``."""

    radii: tuple[float, ...]
    ratio: float

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        object.__setattr__(self, "radii", radii)
        if not 1.0 < self.ratio <= 2.0:
            raise ValueError(f"ladder ratio must lie in (1, 2], got {self.ratio}")
        if len(radii) < 1 or radii[0] <= 0:
            raise ValueError("ladder needs at least one positive radius")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("ladder radii must be strictly increasing")
        for a, b in zip(radii, radii[1:]):
            if abs(b / a - self.ratio) > 1e-9 * self.ratio:
                raise ValueError("ladder radii must grow by the constant ratio")

    @classmethod
    def for_grid(cls, grid: Grid, ratio: float = DEFAULT_RATIO, r_min: float | None = None,
                 r_max: float | None = None) -> "RadiusLadder":
        """Ladder from ``r_min`` (default ``h``) up to the first radius reaching ``r_max``.

        ``r_max`` defaults to the diameter of the grid box, beyond which every
        ball already contains the whole box.
        """
        r_min = grid.spacing if r_min is None else float(r_min)
        r_max = grid.diameter if r_max is None else float(r_max)
        if r_min < grid.spacing * (1 - 1e-12):
            raise ValueError("the smallest radius must be at least the grid spacing")
        count = max(1, int(math.ceil(math.log(max(r_max / r_min, 1.0)) / math.log(ratio) - 1e-9)) + 1)
        return cls(tuple(r_min * ratio**i for i in range(count)), ratio)

    def refined(self) -> "RadiusLadder":
        """Ladder with ratio ``sqrt(ratio)`` that contains every radius of this one."""
        q = math.sqrt(self.ratio)
        radii = []
        for r in self.radii:
            radii.append(r)
            radii.append(r * q)
        return RadiusLadder(tuple(radii[:-1]), q)

    def check_grid(self, grid: Grid) -> None:
        if self.radii[0] < grid.spacing * (1 - 1e-12):
            raise ValueError("ladder starts below the grid spacing")


def maximal_function(f: ScalarField, ladder: RadiusLadder | None = None) -> ScalarField:
    """``M f(x) = max over ladder radii of the mean of |f| on B(x, r)``.

    A lower bound for the continuum supremum; balls are truncated at the box.
    """
    ladder = ladder or RadiusLadder.for_grid(f.grid)
    ladder.check_grid(f.grid)
    averager = BallAverager(f.grid, np.abs(f.values))
    out = np.full(f.grid.shape, -np.inf)
    for r in ladder.radii:
        np.maximum(out, averager.average(r), out=out)
    # |f| >= 0, so negative values are FFT round-off
    return ScalarField(f.grid, np.maximum(out, 0.0))


def vector_magnitude(F: VectorField) -> ScalarField:
    """Euclidean norm of ``F`` at every node."""
    if F.components == 1:
        return ScalarField(F.grid, np.abs(F.values[..., 0]))
    return ScalarField(F.grid, np.sqrt(np.sum(F.values**2, axis=-1)))


def component_maximal_sum(F: VectorField, ladder: RadiusLadder | None = None) -> ScalarField:
    """``sum_i M F_i``, the nodewise upper bound for ``M|F|``."""
    total = np.zeros(F.grid.shape)
    for i in range(F.components):
        total += maximal_function(F.component(i), ladder).values
    return ScalarField(F.grid, total)


def sublevel_set(Mf: ScalarField, lam: float) -> RegionMask:
    """``{x : Mf(x) <= lam}``."""
    if not lam > 0:
        raise ValueError(f"level must be positive, got {lam}")
    return RegionMask(Mf.grid, Mf.values <= lam)


def superlevel_set(Mf: ScalarField, lam: float) -> RegionMask:
    """``{x : Mf(x) > lam}``, the complement of :func:`sublevel_set`."""
    return ~sublevel_set(Mf, lam)


def maximal_at(f: ScalarField, x: Sequence[int], ladder: RadiusLadder) -> float:
    """Single-node maximal function from exact ball sums; an oracle for :func:`maximal_function`."""
    g = f.abs()
    return max(ball_average(g, x, r) for r in ladder.radii)
