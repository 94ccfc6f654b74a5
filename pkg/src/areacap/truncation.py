"""Lipschitz truncation: precise representatives, truncation sets and the exhaustion.

The sets ``A_alpha = {M|grad f| <= alpha}`` are where the precise
representative of ``f`` is Lipschitz with constant proportional to ``alpha``.
:func:`exhaustion` builds the nested closed sets ``C_l`` from cut-off copies of
``f`` and leaves a residual set ``S`` whose Riesz capacity is estimated.
"""

from __future__ import annotations

import json
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .capacity import CapacityEstimate, CapacityProblem, SolverOptions, estimate_capacity
from .fieldio import write_field
from .grid import (
    BallAverager,
    Grid,
    InequalitySides,
    RegionMask,
    ScalarField,
    VectorField,
    ball_average,
    derivative,
    multi_indices,
    lp_norm,
)
from .maximal import RadiusLadder, maximal_function, sublevel_set
from .riesz import KernelSpec

__all__ = [
    "PreciseRepresentative",
    "default_precise_ladder",
    "precise_representative",
    "gradient_magnitude",
    "gradient_maximal",
    "truncation_sets",
    "ChainRecord",
    "chain_estimate_check",
    "calibrate_chain_constants",
    "lipschitz_modulus",
    "smoothstep5",
    "box_cutoff",
    "threshold_level",
    "TruncationDecomposition",
    "exhaustion",
    "lebesgue_decay",
    "PreconditionError",
]


class PreconditionError(ValueError):
    pass


def _as_vector(f: ScalarField | VectorField) -> VectorField:
    if isinstance(f, VectorField):
        return f
    return VectorField(f.grid, f.values[..., None])


# ---------------------------------------------------------------- precise representative


@dataclass(eq=False)
class PreciseRepresentative:
    """Limits of shrinking ball averages; ``0`` on the nonconvergent set ``N``."""

    values: ScalarField
    nonconvergent: RegionMask
    radii: tuple[float, ...]
    tolerance: float

    @property
    def grid(self) -> Grid:
        return self.values.grid

    def record(self) -> dict:
        return {
            "radii": list(self.radii),
            "eps_c": self.tolerance,
            "nonconvergent_nodes": self.nonconvergent.count,
        }


def default_precise_ladder(grid: Grid, top: float = 4.0) -> tuple[float, ...]:
    """Every lattice shell radius from ``top * h`` down to ``h``, decreasing.

    Consecutive radii select different node sets, so each step of the Cauchy
    test sees new nodes.
    """
    reach = int(math.floor(top))
    squares = set()
    for offset in itertools.product(range(reach + 1), repeat=grid.dim):
        q = sum(o * o for o in offset)
        if 1 <= q <= top * top + 1e-9:
            squares.add(q)
    return tuple(grid.spacing * math.sqrt(q) for q in sorted(squares, reverse=True))


def _decreasing_radii(grid: Grid, ladder) -> tuple[float, ...]:
    if ladder is None:
        radii = default_precise_ladder(grid)
    elif isinstance(ladder, RadiusLadder):
        radii = tuple(reversed(ladder.radii))
    else:
        radii = tuple(float(r) for r in ladder)
    if len(radii) < 4:
        raise ValueError("the ladder needs at least 4 radii")
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("precise-representative radii must be strictly decreasing")
    if radii[-1] < grid.spacing * (1 - 1e-12):
        raise ValueError("the smallest radius must be at least the grid spacing")
    return radii


def precise_representative(f: ScalarField, ladder=None, eps_c: float | None = None) -> PreciseRepresentative:
    """Ball averages of ``f`` down a decreasing ladder, with a three-step Cauchy test.

    A node converges when the last three successive differences of its
    averages are all below ``eps_c`` (default ``1e-3`` times the range of
    ``f``); it then takes the last average. Other nodes form ``N`` and get 0.
    """
    radii = _decreasing_radii(f.grid, ladder)
    if eps_c is None:
        span = float(np.max(f.values) - np.min(f.values))
        eps_c = 1e-3 * span
    averager = BallAverager(f.grid, f.values)
    averages = [averager.average(r) for r in radii]
    ok = np.ones(f.grid.shape, dtype=bool)
    for a, b in zip(averages[-4:], averages[-3:]):
        ok &= np.abs(b - a) < eps_c
    if eps_c == 0.0:
        # a constant field: every average equals the constant up to round-off
        ok[:] = True
    values = np.where(ok, averages[-1], 0.0)
    return PreciseRepresentative(ScalarField(f.grid, values), RegionMask(f.grid, ~ok), radii, float(eps_c))


# ---------------------------------------------------------------- truncation sets


def gradient_magnitude(f: ScalarField | VectorField) -> ScalarField:
    """Nodewise Euclidean norm of all first partials (Frobenius norm for maps)."""
    F = _as_vector(f)
    n = F.grid.dim
    total = np.zeros(F.grid.shape)
    for c in range(F.components):
        comp = F.component(c)
        for i in range(n):
            d = derivative(comp, tuple(int(i == j) for j in range(n))).values
            total += d * d
    return ScalarField(F.grid, np.sqrt(total))


def gradient_maximal(f: ScalarField | VectorField, ladder: RadiusLadder | None = None) -> ScalarField:
    """``M|grad f|``."""
    return maximal_function(gradient_magnitude(f), ladder)


def truncation_sets(f: ScalarField | VectorField, alphas: Sequence[float],
                    ladder: RadiusLadder | None = None, grad_maximal: ScalarField | None = None) -> list[RegionMask]:
    """``A_alpha = {M|grad f| <= alpha}`` for each level."""
    Mg = grad_maximal if grad_maximal is not None else gradient_maximal(f, ladder)
    return [sublevel_set(Mg, a) for a in alphas]


# ---------------------------------------------------------------- chain estimates


@dataclass(frozen=True)
class ChainRecord:
    """Both sides of the three estimates behind the Lipschitz bound on ``A_alpha``.

    ``radii``: two concentric averages at radii ``r > s`` (right side
    ``(r/s)^n r alpha``); ``precise``: ``f*(x)`` against the average on
    ``B(x, r)`` (right side ``r alpha``); ``shifted``: averages on ``B(x, d)``
    and ``B(y, d)`` with ``d = |x - y|`` (right side ``d alpha``).
    """

    radii: InequalitySides
    precise: InequalitySides
    shifted: InequalitySides

    def ratios(self) -> tuple[float, float, float]:
        return (self.radii.ratio, self.precise.ratio, self.shifted.ratio)

    def record(self) -> dict:
        return {name: [getattr(self, name).lhs, getattr(self, name).rhs_unit] for name in ("radii", "precise", "shifted")}


def chain_estimate_check(f: ScalarField, x: Sequence[int], y: Sequence[int], r: float, s: float, alpha: float,
                         rep: PreciseRepresentative | None = None, grad_maximal: ScalarField | None = None,
                         ladder: RadiusLadder | None = None) -> ChainRecord:
    """The three chain estimates at ``x, y`` for level ``alpha``.

    ``x`` and ``y`` must lie in ``A_alpha`` and outside ``N``.
    """
    if not 0 < s < r:
        raise ValueError("need 0 < s < r")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = tuple(int(i) for i in x)
    y = tuple(int(i) for i in y)
    if x == y:
        raise ValueError("x and y must differ")
    Mg = grad_maximal if grad_maximal is not None else gradient_maximal(f, ladder)
    rep = rep if rep is not None else precise_representative(f)
    for node in (x, y):
        if Mg.values[node] > alpha or rep.nonconvergent.flags[node]:
            raise PreconditionError(f"precondition violated: node {node} is not in A_alpha minus N")
    n = f.grid.dim
    avg_r = ball_average(f, x, r)
    radii = InequalitySides(abs(avg_r - ball_average(f, x, s)), (r / s) ** n * r * alpha)
    precise = InequalitySides(abs(rep.values.values[x] - avg_r), r * alpha)
    d = float(np.linalg.norm(f.grid.node(x) - f.grid.node(y)))
    shifted = InequalitySides(abs(ball_average(f, x, d) - ball_average(f, y, d)), d * alpha)
    return ChainRecord(radii, precise, shifted)


def calibrate_chain_constants(records: Sequence[ChainRecord], safety: float = 2.0) -> tuple[float, float, float]:
    """Per-estimate constants: ``safety`` times the largest observed ratio."""
    if not records:
        raise ValueError("no calibration records")
    worst = np.max(np.array([rec.ratios() for rec in records]), axis=0)
    return tuple(float(safety * w) for w in worst)


# ---------------------------------------------------------------- Lipschitz modulus

_ALL_PAIRS_LIMIT = 20_000_000


def lipschitz_modulus(rep: PreciseRepresentative, mask: RegionMask, pairs: int = 200_000,
                      seed: int = 0) -> float:
    """Largest difference quotient of ``f*`` over nodes of ``mask`` outside ``N``.

    In 1-D the maximum over consecutive usable nodes is the exact maximum over
    all pairs. In higher dimension all pairs are used when there are at most
    ``2e7`` of them, otherwise ``pairs`` random pairs drawn with ``seed``.
    """
    if mask.grid != rep.grid:
        raise ValueError("mask and representative live on different grids")
    usable = mask - rep.nonconvergent
    idx = np.argwhere(usable.flags)
    if len(idx) < 2:
        raise ValueError("need at least 2 usable nodes")
    grid = rep.grid
    pts = idx * grid.spacing
    vals = rep.values.values[usable.flags]
    if grid.dim == 1:
        dv = np.abs(np.diff(vals))
        dx = np.diff(pts[:, 0])
        return float(np.max(dv / dx))
    k = len(idx)
    total = k * (k - 1) // 2
    if total <= _ALL_PAIRS_LIMIT:
        best = 0.0
        chunk = max(1, 4_000_000 // k)
        for start in range(0, k - 1, chunk):
            stop = min(k - 1, start + chunk)
            a = np.arange(start, stop)
            dv = np.abs(vals[a, None] - vals[None, :])
            dx = np.sqrt(np.sum((pts[a, None, :] - pts[None, :, :]) ** 2, axis=-1))
            upper = np.arange(k)[None, :] > a[:, None]
            q = np.where(upper, dv / np.where(upper, dx, 1.0), 0.0)
            best = max(best, float(q.max()))
        return best
    if pairs < 1000:
        raise ValueError("sample at least 1000 pairs")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, k, size=pairs)
    j = rng.integers(0, k - 1, size=pairs)
    j = np.where(j >= i, j + 1, j)
    dx = np.sqrt(np.sum((pts[i] - pts[j]) ** 2, axis=-1))
    return float(np.max(np.abs(vals[i] - vals[j]) / dx))


# ---------------------------------------------------------------- exhaustion


def smoothstep5(t: np.ndarray) -> np.ndarray:
    """``6t^5 - 15t^4 + 10t^3`` on ``[0, 1]``, clamped outside; C^2 with flat ends."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def box_cutoff(grid: Grid, inner: tuple[Sequence[float], Sequence[float]],
               outer: tuple[Sequence[float], Sequence[float]]) -> ScalarField:
    """Tensor-product ramp: 1 on the inner box, 0 outside the outer box."""
    lo_i, hi_i = (np.asarray(v, dtype=float) for v in inner)
    lo_o, hi_o = (np.asarray(v, dtype=float) for v in outer)
    if np.any(lo_o > lo_i) or np.any(hi_o < hi_i):
        raise ValueError("outer box must contain the inner box")
    x = grid.coordinates()
    z = np.ones(grid.shape)
    for a in range(grid.dim):
        xa = x[..., a]
        left = lo_i[a] - lo_o[a]
        right = hi_o[a] - hi_i[a]
        up = smoothstep5((xa - lo_o[a]) / left) if left > 0 else (xa >= lo_i[a]).astype(float)
        down = smoothstep5((hi_o[a] - xa) / right) if right > 0 else (xa <= hi_i[a]).astype(float)
        z *= up * down
    return ScalarField(grid, z)


def gradient_sobolev_norm(f: ScalarField | VectorField, k: int, p: float) -> float:
    """``||grad f||_{W^{k-1,p}}``, summing ``p``-th powers over components and partials."""
    F = _as_vector(f)
    n = F.grid.dim
    total = 0.0
    for c in range(F.components):
        comp = F.component(c)
        for order in range(1, k + 1):
            for beta in multi_indices(n, order):
                total += lp_norm(derivative(comp, beta), p) ** p
    return total ** (1.0 / p)


def threshold_level(norm: float, j: int, p: float) -> float:
    """Smallest power of two ``a`` with ``a^p >= 2^j norm^p`` (``1`` when ``norm = 0``)."""
    if norm == 0.0:
        return 1.0
    target = j / p + math.log2(norm)
    e = math.ceil(target - 1e-12)
    # guard the rounding at exact powers
    while (2.0**e) ** p < 2.0**j * norm**p:
        e += 1
    while (2.0 ** (e - 1)) ** p >= 2.0**j * norm**p:
        e -= 1
    return 2.0**e


Box = tuple[tuple[float, ...], tuple[float, ...]]


@dataclass(eq=False)
class TruncationDecomposition:
    boxes: list[Box]
    levels: list[float]
    gradient_norms: list[float]
    level_sets: list[RegionMask]
    B: list[RegionMask]
    C: list[RegionMask]
    residual: RegionMask
    domain: RegionMask
    nonconvergent: RegionMask
    k: int
    p: float
    residual_capacity: CapacityEstimate | None = None
    params: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return len(self.levels)

    def record(self) -> dict:
        return {
            "J": self.J,
            "k": self.k,
            "p": self.p,
            "boxes": [[list(lo), list(hi)] for lo, hi in self.boxes],
            "levels": self.levels,
            "gradient_norms": self.gradient_norms,
            "level_set_nodes": [m.count for m in self.level_sets],
            "C_nodes": [m.count for m in self.C],
            "domain_nodes": self.domain.count,
            "residual_nodes": self.residual.count,
            "nonconvergent_nodes": self.nonconvergent.count,
            "residual_capacity": None if self.residual_capacity is None else self.residual_capacity.record(),
            **self.params,
        }

    def save(self, directory) -> Path:
        """Mask files for ``A^j``, ``B_l``, ``C_l``, ``S`` and ``N`` plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files: dict[str, list[str] | str] = {}
        for name, masks in (("A", self.level_sets), ("B", self.B), ("C", self.C)):
            files[name] = []
            for i, m in enumerate(masks, start=1):
                fname = f"{name}_{i}.json"
                write_field(directory / fname, m)
                files[name].append(fname)
        for name, m in (("S", self.residual), ("N", self.nonconvergent), ("domain", self.domain)):
            fname = f"{name}.json"
            write_field(directory / fname, m)
            files[name] = fname
        manifest = {"files": files, **self.record()}
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


def _check_boxes(grid: Grid, boxes: Sequence[Box]) -> list[Box]:
    out = []
    for lo, hi in boxes:
        lo = tuple(float(v) for v in lo)
        hi = tuple(float(v) for v in hi)
        if len(lo) != grid.dim or len(hi) != grid.dim or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"bad box {lo}, {hi}")
        out.append((lo, hi))
    for (lo1, hi1), (lo2, hi2) in zip(out, out[1:]):
        if any(a < b for a, b in zip(lo1, lo2)) or any(a > b for a, b in zip(hi1, hi2)):
            raise ValueError("boxes must be nested and increasing")
    return out


def exhaustion(f: ScalarField | VectorField, boxes: Sequence[Box], k: int, p: float, J: int | None = None,
               alpha_cap: float = 2.0**40, ladder: RadiusLadder | None = None, eps_c: float | None = None,
               capacity: bool = True, padding: float = 0.5,
               solver: SolverOptions | None = None) -> TruncationDecomposition:
    """Nested closed sets ``C_1 ⊆ ... ⊆ C_J`` covering the open box ``Omega_J`` up to ``S``.

    ``boxes`` are ``Omega_1 ⊂ Omega_2 ⊂ ...``; ``J`` defaults to their number
    and the grid box serves as ``Omega_{J+1}`` when no further box is listed.
    ``f_j = f zeta_j`` with ``zeta_j`` equal to 1 on ``Omega_j`` and 0 outside
    ``Omega_{j+1}``; ``alpha_j`` is the smallest power of two with
    ``alpha_j^p >= 2^j ||grad f_j||^p``; ``B_l`` intersects ``A^j`` for
    ``l <= j <= J`` and ``C_l = B_l ∩ closure(Omega_l)``.
    """
    grid = f.grid
    boxes = _check_boxes(grid, boxes)
    J = len(boxes) if J is None else int(J)
    if not 1 <= J <= len(boxes):
        raise ValueError(f"J must be between 1 and {len(boxes)}")
    if k < 1:
        raise ValueError("k must be at least 1")
    if not p >= 1:
        raise ValueError("p must be >= 1")
    if k >= 2:
        KernelSpec(k - 1, grid.dim).check_exponent(p)
    outer = list(boxes[: J + 1])
    if len(outer) == J:
        outer.append((tuple(grid.lower.tolist()), tuple(grid.upper.tolist())))
    F = _as_vector(f)
    levels, norms, sets = [], [], []
    for j in range(1, J + 1):
        zeta = box_cutoff(grid, outer[j - 1], outer[j]).values
        fj = VectorField(grid, F.values * zeta[..., None])
        norm = gradient_sobolev_norm(fj, k, p)
        level = threshold_level(norm, j, p)
        if level > alpha_cap:
            raise ValueError(
                f"threshold for level {j} is {level:g}, above alpha_cap {alpha_cap:g} "
                f"(||grad f_j||_W^(k-1,p) = {norm:g}, p = {p})"
            )
        levels.append(level)
        norms.append(norm)
        sets.append(sublevel_set(gradient_maximal(fj, ladder), level))
    B = []
    for l in range(1, J + 1):
        acc = sets[l - 1]
        for j in range(l + 1, J + 1):
            acc = acc & sets[j - 1]
        B.append(acc)
    C = [B[l] & RegionMask.box(grid, *outer[l], closed=True) for l in range(J)]
    domain = RegionMask.box(grid, *outer[J - 1], closed=False)
    covered = RegionMask.empty(grid)
    for c in C:
        covered = covered | c
    residual = domain - covered
    N = RegionMask.empty(grid)
    for c in range(F.components):
        N = N | precise_representative(F.component(c), eps_c=eps_c).nonconvergent
    cap = None
    if capacity and k >= 2:
        cap = estimate_capacity(CapacityProblem(residual, KernelSpec(k - 1, grid.dim), p, padding), solver)
    return TruncationDecomposition(
        boxes=outer[:J],
        levels=levels,
        gradient_norms=norms,
        level_sets=sets,
        B=B,
        C=C,
        residual=residual,
        domain=domain,
        nonconvergent=N,
        k=k,
        p=float(p),
        residual_capacity=cap,
    )


@dataclass
class LebesgueRow:
    level: float
    measure: float
    product: float

    def record(self) -> dict:
        return {"alpha": self.level, "measure": self.measure, "product": self.product}


def lebesgue_decay(f: ScalarField | VectorField, alphas: Sequence[float], p: float,
                   ladder: RadiusLadder | None = None) -> list[LebesgueRow]:
    """``|{M|grad f| > alpha}|`` and ``alpha^p`` times it, the measure-based variant of the exhaustion."""
    Mg = gradient_maximal(f, ladder)
    rows = []
    for a in alphas:
        bad = ~sublevel_set(Mg, a)
        rows.append(LebesgueRow(float(a), bad.measure, float(a) ** p * bad.measure))
    return rows
