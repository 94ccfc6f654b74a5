"""Discrete Riesz capacity as a constrained convex program.

``R_{alpha,p}(E)`` is estimated by minimising ``h^n sum phi^p`` over
``phi >= 0`` on a padded candidate grid subject to ``I_alpha * phi >= 1`` at
every node of ``E``. The returned value is always that of a feasible ``phi``
(rescaled so its potential is at least 1 on ``E``), hence an upper bound for
the discrete optimum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.optimize

from .grid import Grid, RegionMask, ScalarField, VectorField, fft_workers
from .maximal import RadiusLadder, component_maximal_sum, maximal_function, superlevel_set, vector_magnitude
from .riesz import KernelSpec, radial_weights

__all__ = [
    "SolverOptions",
    "CapacityProblem",
    "CapacityEstimate",
    "estimate_capacity",
    "weak_type_table",
    "subadditivity_check",
    "measure_capacity_check",
    "critical_exponent",
]


@dataclass(frozen=True)
class SolverOptions:
    """Settings of the penalty solver.

    The quadratic penalty ``mu/2 * sum max(0, lambda/mu - c)^2`` carries
    multiplier estimates ``lambda`` (method of multipliers); ``mu`` starts at
    ``mu0`` and is multiplied by ``mu_growth`` whenever the worst constraint
    violation fails to shrink by a factor of four.
    """

    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e12
    max_outer: int = 40
    max_inner: int = 4000
    tol: float = 1e-10
    dense_limit: int = 4_000_000

    def record(self) -> dict:
        return {
            "mu0": self.mu0,
            "mu_growth": self.mu_growth,
            "mu_max": self.mu_max,
            "max_outer": self.max_outer,
            "max_inner": self.max_inner,
            "tol": self.tol,
        }


@dataclass(frozen=True)
class CapacityProblem:
    target: RegionMask
    spec: KernelSpec
    p: float
    padding: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "p", float(self.p))
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.spec.n != self.target.grid.dim:
            raise ValueError("kernel dimension does not match the target grid")
        self.spec.check_exponent(self.p)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def pad_nodes(self) -> tuple[int, ...]:
        return tuple(int(math.ceil(self.padding * (k - 1) - 1e-9)) for k in self.target.grid.shape)

    def candidate_grid(self) -> Grid:
        g = self.target.grid
        pad = self.pad_nodes
        shape = tuple(k + 2 * q for k, q in zip(g.shape, pad))
        origin = tuple(o - q * g.spacing for o, q in zip(g.origin, pad))
        return Grid(shape, origin, g.spacing)

    def target_indices(self) -> np.ndarray:
        """Target nodes in candidate-grid coordinates, flat order."""
        idx = np.argwhere(self.target.flags)
        return idx + np.asarray(self.pad_nodes)

    def record(self) -> dict:
        return {
            "alpha": self.spec.alpha,
            "gamma": self.spec.gamma,
            "p": self.p,
            "padding": self.padding,
            "target_nodes": self.target.count,
            "grid": self.target.grid.header(),
        }


@dataclass(eq=False)
class CapacityEstimate:
    value: float
    margin: float
    iterations: int
    converged: bool
    pre_rescale_margin: float = math.inf
    outer_iterations: int = 0
    phi: ScalarField | None = field(default=None, repr=False)

    def record(self) -> dict:
        return {
            "value": self.value,
            "margin": None if math.isinf(self.margin) else self.margin,
            "pre_rescale_margin": None if math.isinf(self.pre_rescale_margin) else self.pre_rescale_margin,
            "iterations": self.iterations,
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
        }


class PotentialOperator:
    """``phi -> (I_alpha * phi)`` restricted to target nodes, and its adjoint."""

    def __init__(self, grid: Grid, targets: np.ndarray, spec: KernelSpec, dense_limit: int = 4_000_000):
        self.grid = grid
        self.targets = targets
        stencil = radial_weights(grid, spec.exponent) / spec.gamma
        self._centre = np.asarray([k - 1 for k in grid.shape])
        self.size = grid.size
        if len(targets) * grid.size <= dense_limit:
            cand = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=1)
            rows = []
            for t in targets:
                off = cand - t + self._centre
                rows.append(stencil[tuple(off.T)])
            self._matrix = np.array(rows) if rows else np.zeros((0, grid.size))
        else:
            self._matrix = None
            self._fft_shape = tuple(
                scipy.fft.next_fast_len(a + b - 1, real=True) for a, b in zip(grid.shape, stencil.shape)
            )
            self._axes = tuple(range(grid.dim))
            self._stencil_hat = scipy.fft.rfftn(stencil, s=self._fft_shape, axes=self._axes, workers=fft_workers())
            self._window = tuple(slice(k - 1, 2 * k - 1) for k in grid.shape)

    @property
    def dense(self) -> bool:
        return self._matrix is not None

    def _convolve(self, values: np.ndarray) -> np.ndarray:
        w = fft_workers()
        prod = scipy.fft.rfftn(values, s=self._fft_shape, axes=self._axes, workers=w) * self._stencil_hat
        return scipy.fft.irfftn(prod, s=self._fft_shape, axes=self._axes, workers=w)[self._window]

    def apply(self, phi: np.ndarray) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix @ phi
        full = self._convolve(phi.reshape(self.grid.shape))
        return full[tuple(self.targets.T)]

    def adjoint(self, lam: np.ndarray) -> np.ndarray:
        if self._matrix is not None:
            return lam @ self._matrix
        embed = np.zeros(self.grid.shape)
        embed[tuple(self.targets.T)] = lam
        return self._convolve(embed).reshape(-1)


def estimate_capacity(problem: CapacityProblem, opts: SolverOptions | None = None,
                      keep_phi: bool = False) -> CapacityEstimate:
    """Upper estimate of ``R_{alpha,p}(E)`` for the problem's target set.

    Starts from the constant ``phi0 = 1 / min_E (row sums of the potential
    operator)``, which is feasible, and runs the penalty solver with a
    bound-constrained quasi-Newton inner loop. The final ``phi`` is divided by
    ``min_E I_alpha * phi`` so the reported value is certified feasible.
    """
    opts = opts or SolverOptions()
    grid = problem.candidate_grid()
    if problem.target.is_empty():
        phi = ScalarField(grid, np.zeros(grid.shape)) if keep_phi else None
        return CapacityEstimate(0.0, math.inf, 0, True, math.inf, 0, phi)

    p = problem.p
    vol = grid.cell_volume
    op = PotentialOperator(grid, problem.target_indices(), problem.spec, opts.dense_limit)
    ones = np.ones(grid.size)
    row_sums = op.apply(ones)
    scale = 1.0 / float(row_sums.min())
    m = grid.size

    # work in x = phi / scale, objective normalised so that x = 1 costs 1
    def objective(x):
        xp = np.power(x, p)
        return float(np.sum(xp)) / m, p * np.power(x, p - 1) / m if p != 1 else np.full_like(x, 1.0 / m)

    def constraint(x):
        return scale * op.apply(x) - 1.0

    x = np.ones(m)
    lam = np.zeros(len(problem.target_indices()))
    mu = opts.mu0
    bounds = [(0.0, None)] * m
    iterations = 0
    outer = 0
    last_violation = math.inf
    converged = False
    for outer in range(1, opts.max_outer + 1):

        def augmented(z, lam=lam, mu=mu):
            fval, fgrad = objective(z)
            c = constraint(z)
            shifted = np.maximum(0.0, lam - mu * c)
            val = fval + (np.dot(shifted, shifted) - np.dot(lam, lam)) / (2.0 * mu)
            grad = fgrad - scale * op.adjoint(shifted)
            return val, grad

        res = scipy.optimize.minimize(
            augmented,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": opts.max_inner, "ftol": 1e-16, "gtol": 1e-13, "maxcor": 30},
        )
        x = np.maximum(res.x, 0.0)
        iterations += int(res.nit)
        c = constraint(x)
        violation = float(max(0.0, -c.min()))
        new_lam = np.maximum(0.0, lam - mu * c)
        complementarity = float(np.max(np.abs(np.minimum(new_lam, c))))
        step = float(np.max(np.abs(new_lam - lam))) if len(lam) else 0.0
        lam = new_lam
        if violation <= opts.tol and complementarity <= max(opts.tol, 1e-8 * step + opts.tol):
            converged = True
            break
        if violation > 0.25 * last_violation:
            mu = min(mu * opts.mu_growth, opts.mu_max)
        last_violation = violation

    phi = scale * x
    potential = op.apply(phi)
    low = float(potential.min())
    if not low > 0:
        # the solver collapsed phi; fall back to the feasible starting point
        phi = scale * np.ones(m)
        potential = op.apply(phi)
        low = float(potential.min())
    pre_margin = low - 1.0
    phi = phi / low
    margin = float(op.apply(phi).min()) - 1.0
    value = float(np.sum(np.power(phi, p)) * vol)
    converged = converged and pre_margin >= -1e-4
    field_out = ScalarField(grid, phi.reshape(grid.shape)) if keep_phi else None
    return CapacityEstimate(value, margin, iterations, converged, pre_margin, outer, field_out)


def potential_on_target(problem: CapacityProblem, phi: ScalarField, opts: SolverOptions | None = None) -> np.ndarray:
    """``I_alpha * phi`` at the target nodes, for ``phi`` on the candidate grid."""
    opts = opts or SolverOptions()
    grid = problem.candidate_grid()
    if phi.grid != grid:
        raise ValueError("phi does not live on the problem's candidate grid")
    op = PotentialOperator(grid, problem.target_indices(), problem.spec, opts.dense_limit)
    return op.apply(phi.values.reshape(-1))


def critical_exponent(n: int, alpha: float, p: float) -> float:
    """``p / p*`` with ``p* = np / (n - alpha p)``; at ``p = 1`` this is ``(n - alpha) / n``."""
    return (n - alpha * p) / n


@dataclass
class WeakTypeRow:
    level: float
    nodes: int
    value: float
    product: float
    converged: bool
    bound_nodes: int | None = None
    bound_value: float | None = None

    def record(self) -> dict:
        out = {
            "lambda": self.level,
            "nodes": self.nodes,
            "value": self.value,
            "product": self.product,
            "converged": self.converged,
        }
        if self.bound_value is not None:
            out["bound_nodes"] = self.bound_nodes
            out["bound_value"] = self.bound_value
        return out


def weak_type_table(f: ScalarField | VectorField, k: int, p: float, levels: Sequence[float],
                    ladder: RadiusLadder | None = None, padding: float = 0.5,
                    opts: SolverOptions | None = None) -> list[WeakTypeRow]:
    """Capacity ``R_{k,p}({Mf > lambda})`` and ``lambda^p`` times it for each level.

    For a vector field the set is ``{M|F| > lambda}``; each row then also
    carries the capacity of the larger set ``{sum_i M F_i > lambda}``.
    """
    grid = f.grid
    spec = KernelSpec(k, grid.dim)
    spec.check_exponent(p)
    bound = None
    if isinstance(f, VectorField):
        Mf = maximal_function(vector_magnitude(f), ladder)
        bound = component_maximal_sum(f, ladder)
    else:
        Mf = maximal_function(f, ladder)
    rows = []
    for lam in levels:
        E = superlevel_set(Mf, lam)
        est = estimate_capacity(CapacityProblem(E, spec, p, padding), opts)
        row = WeakTypeRow(float(lam), E.count, est.value, lam**p * est.value, est.converged)
        if bound is not None:
            Eb = superlevel_set(bound, lam)
            row.bound_nodes = Eb.count
            row.bound_value = estimate_capacity(CapacityProblem(Eb, spec, p, padding), opts).value
        rows.append(row)
    return rows


@dataclass
class SubadditivityReport:
    lhs: float
    rhs: float
    part_values: list[float]
    sup_value: float
    sup_margin: float

    def holds(self, tol: float = 1e-6) -> bool:
        return self.lhs <= self.rhs * (1 + tol)

    def record(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "part_values": self.part_values,
            "sup_value": self.sup_value,
            "sup_margin": None if math.isinf(self.sup_margin) else self.sup_margin,
        }


def subadditivity_check(E: RegionMask, parts: Sequence[RegionMask], spec: KernelSpec, p: float,
                        padding: float = 0.5, opts: SolverOptions | None = None) -> SubadditivityReport:
    """Capacity of ``E`` against the summed capacities of a cover.

    Also forms ``max_i phi_i`` from the parts' solutions: it is admissible for
    ``E`` and its cost is at most the sum of the parts' costs.
    """
    if not parts:
        raise ValueError("need at least one part")
    union = RegionMask.empty(E.grid)
    for part in parts:
        union = union | part
    if not E.issubset(union):
        raise ValueError("the parts do not cover E")
    whole = CapacityProblem(E, spec, p, padding)
    lhs = estimate_capacity(whole, opts).value
    values = []
    sup = None
    for part in parts:
        est = estimate_capacity(CapacityProblem(part, spec, p, padding), opts, keep_phi=True)
        values.append(est.value)
        sup = est.phi.values if sup is None else np.maximum(sup, est.phi.values)
    grid = whole.candidate_grid()
    if E.is_empty():
        sup_margin = math.inf
    else:
        sup_margin = float(potential_on_target(whole, ScalarField(grid, sup), opts).min()) - 1.0
    sup_value = float(np.sum(np.power(sup, p)) * grid.cell_volume)
    return SubadditivityReport(lhs, float(math.fsum(values)), values, sup_value, sup_margin)


@dataclass
class MeasureCapacityRecord:
    measure: float
    exponent: float
    measure_power: float
    capacity: float
    branch: str

    def record(self) -> dict:
        return {
            "measure": self.measure,
            "exponent": self.exponent,
            "measure_power": self.measure_power,
            "capacity": self.capacity,
            "branch": self.branch,
        }


def measure_capacity_check(E: RegionMask, spec: KernelSpec, p: float, padding: float = 0.5,
                           opts: SolverOptions | None = None) -> MeasureCapacityRecord:
    """``|E|`` raised to ``p/p*`` (or ``(n - alpha)/n`` when ``p = 1``) next to the capacity of ``E``."""
    spec.check_exponent(p)
    n = spec.n
    if p == 1:
        exponent, branch = (n - spec.alpha) / n, "p=1"
    else:
        exponent, branch = p / (n * p / (n - spec.alpha * p)), "p>1"
    cap = estimate_capacity(CapacityProblem(E, spec, p, padding), opts).value
    measure = E.measure
    return MeasureCapacityRecord(measure, exponent, measure**exponent if measure > 0 else 0.0, cap, branch)
