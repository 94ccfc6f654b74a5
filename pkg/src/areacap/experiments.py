"""Experiment kinds driven by config records.

Each runner takes the resolved config and a context and returns report records
``(kind, payload)``. Problems in the inputs raise :class:`ConfigError`; failed
checks are collected in ``ctx.violations``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .area import MappingProblem, verify_area_formula
from .capacity import CapacityProblem, SolverOptions, estimate_capacity, weak_type_table
from .fieldio import FieldFormatError, read_field, read_mask, read_scalar_field, read_vector_field, write_field
from .grid import RegionMask, ScalarField, VectorField, poincare_check
from .maximal import DEFAULT_RATIO, RadiusLadder, maximal_function, sublevel_set, vector_magnitude
from .riesz import KernelSpec, kernel_inequality_check, riesz_potential, telescoping_identity_check
from .truncation import (
    PreconditionError,
    calibrate_chain_constants,
    chain_estimate_check,
    exhaustion,
    gradient_maximal,
    lipschitz_modulus,
    precise_representative,
    truncation_sets,
)


class ConfigError(ValueError):
    """Malformed or inconsistent experiment input (exit status 1)."""


@dataclass
class Context:
    config_dir: Path
    out_dir: Path
    seed: int
    violations: list[str] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    def emit(self, kind: str, payload: dict, wall_time: float) -> None:
        self.records.append({"kind": kind, "payload": jsonable(payload), "wall_time": wall_time})

    def check(self, ok: bool, message: str) -> bool:
        if not ok:
            self.violations.append(message)
        return ok


def jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# ---------------------------------------------------------------- config access


def require(cfg: dict, key: str, kind: type | tuple[type, ...] | None = None) -> Any:
    if key not in cfg:
        raise ConfigError(f"config field '{key}' is required for kind '{cfg.get('kind')}'")
    value = cfg[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"config field '{key}' has the wrong type ({type(value).__name__})")
    return value


def resolve_path(ctx: Context, value: str, key: str) -> Path:
    if not isinstance(value, str):
        raise ConfigError(f"config field '{key}' must be a path string")
    path = Path(value)
    if not path.is_absolute():
        path = ctx.config_dir / path
    if not path.exists():
        raise ConfigError(f"config field '{key}': file not found: {path}")
    return path


def _load(loader: Callable, ctx: Context, cfg: dict, key: str):
    path = resolve_path(ctx, require(cfg, key), key)
    try:
        return loader(path)
    except (FieldFormatError, ValueError, OSError) as exc:
        raise ConfigError(f"config field '{key}': cannot read {path}: {exc}") from exc


def load_ladder(cfg: dict, grid) -> RadiusLadder | None:
    spec = cfg.get("ladder")
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError("config field 'ladder' must be a record {ratio, r_min, r_max}")
    try:
        return RadiusLadder.for_grid(grid, spec.get("ratio", DEFAULT_RATIO), spec.get("r_min"), spec.get("r_max"))
    except ValueError as exc:
        raise ConfigError(f"config field 'ladder': {exc}") from exc


def solver_options(cfg: dict) -> SolverOptions:
    sched = cfg.get("penalty_schedule", {}) or {}
    if not isinstance(sched, dict):
        raise ConfigError("config field 'penalty_schedule' must be a record {mu0, growth, mu_max}")
    return SolverOptions(
        mu0=float(sched.get("mu0", 10.0)),
        mu_growth=float(sched.get("growth", 10.0)),
        mu_max=float(sched.get("mu_max", 1e12)),
        max_outer=int(cfg.get("max_outer", 40)),
        max_inner=int(cfg.get("max_iters", 4000)),
        tol=float(cfg.get("tol", 1e-10)),
    )


def _stats(values: np.ndarray) -> dict:
    return {"min": float(values.min()), "max": float(values.max()), "mean": float(values.mean())}


def _timed(fn: Callable, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


# ---------------------------------------------------------------- runners


def run_maximal(cfg: dict, ctx: Context) -> None:
    f = _load(read_field, ctx, cfg, "field_file")
    if isinstance(f, RegionMask):
        raise ConfigError("config field 'field_file' must hold a field, not a mask")
    g = vector_magnitude(f) if isinstance(f, VectorField) else f
    ladder = load_ladder(cfg, g.grid)
    Mf, wall = _timed(maximal_function, g, ladder)
    write_field(ctx.out_dir / "maximal.json", Mf)
    levels = [float(v) for v in cfg.get("levels", [])]
    masks = [sublevel_set(Mf, lam) for lam in sorted(levels)]
    nested = all(a.issubset(b) for a, b in zip(masks, masks[1:]))
    ctx.check(nested, "sublevel sets are not nested")
    ctx.emit("maximal", {
        "stats": _stats(Mf.values),
        "levels": sorted(levels),
        "sublevel_nodes": [m.count for m in masks],
        "nested": nested,
        "output": "maximal.json",
    }, wall)


def run_potential(cfg: dict, ctx: Context) -> None:
    phi = _load(read_scalar_field, ctx, cfg, "field_file")
    try:
        spec = KernelSpec(float(require(cfg, "alpha", (int, float))), phi.grid.dim)
    except ValueError as exc:
        raise ConfigError(f"config field 'alpha': {exc}") from exc
    method = cfg.get("method", "fft")
    if method not in ("fft", "direct", "both"):
        raise ConfigError("config field 'method' must be fft, direct or both")
    first = "direct" if method == "direct" else "fft"
    pot, wall = _timed(riesz_potential, phi, spec, first)
    write_field(ctx.out_dir / "potential.json", pot)
    payload = {"kernel": spec.record(), "method": method, "stats": _stats(pot.values), "output": "potential.json"}
    if method == "both":
        ref = riesz_potential(phi, spec, "direct")
        scale = max(float(np.max(np.abs(ref.values))), 1e-300)
        rel = float(np.max(np.abs(pot.values - ref.values))) / scale
        payload["direct_vs_fft"] = rel
        ctx.check(rel <= 1e-8, f"direct and FFT potentials differ by {rel:.3g}")
    ctx.emit("potential", payload, wall)


def run_capacity(cfg: dict, ctx: Context) -> None:
    mask = _load(read_mask, ctx, cfg, "mask_file")
    try:
        spec = KernelSpec(float(require(cfg, "alpha", (int, float))), mask.grid.dim)
        problem = CapacityProblem(mask, spec, float(require(cfg, "p", (int, float))), float(cfg.get("padding", 0.5)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    est, wall = _timed(estimate_capacity, problem, solver_options(cfg))
    ctx.check(mask.is_empty() or est.margin >= -1e-9, f"capacity estimate is infeasible (margin {est.margin})")
    ctx.emit("capacity", {"inputs": problem.record(), **est.record()}, wall)


def run_weak_type(cfg: dict, ctx: Context) -> None:
    f = _load(read_field, ctx, cfg, "field_file")
    if isinstance(f, RegionMask):
        raise ConfigError("config field 'field_file' must hold a field")
    levels = [float(v) for v in require(cfg, "levels", list)]
    k = int(require(cfg, "k", int))
    p = float(require(cfg, "p", (int, float)))
    try:
        rows, wall = _timed(weak_type_table, f, k, p, levels, load_ladder(cfg, f.grid),
                            float(cfg.get("padding", 0.5)), solver_options(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    payload = {"k": k, "p": p, "rows": [r.record() for r in rows]}
    good = [(r.level, r.value) for r in rows if r.value > 0]
    if len(good) >= 2:
        x = np.log([g[0] for g in good])
        y = np.log([g[1] for g in good])
        payload["slope"] = float(np.polyfit(x, y, 1)[0])
    ctx.emit("weak_type", payload, wall)


def run_truncation(cfg: dict, ctx: Context) -> None:
    f = _load(read_scalar_field, ctx, cfg, "field_file")
    levels = sorted(float(v) for v in require(cfg, "levels", list))
    t = time.perf_counter()
    ladder = load_ladder(cfg, f.grid)
    Mg = gradient_maximal(f, ladder)
    rep = precise_representative(f, eps_c=cfg.get("eps_c"))
    masks = truncation_sets(f, levels, grad_maximal=Mg)
    nested = all(a.issubset(b) for a, b in zip(masks, masks[1:]))
    ctx.check(nested, "truncation sets are not nested")
    rows = []
    for lam, A in zip(levels, masks):
        usable = (A - rep.nonconvergent).count
        modulus = lipschitz_modulus(rep, A, int(cfg.get("pairs", 200_000)), ctx.seed) if usable >= 2 else None
        rows.append({
            "alpha": lam,
            "nodes": A.count,
            "usable_nodes": usable,
            "modulus": modulus,
            "ratio": None if modulus is None else modulus / lam,
        })
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    payload = {
        "precise_representative": rep.record(),
        "nested": nested,
        "rows": rows,
        "ratio_spread": max(ratios) / min(ratios) if ratios and min(ratios) > 0 else None,
    }
    ctx.emit("truncation", payload, time.perf_counter() - t)


def _boxes(cfg: dict, dim: int):
    boxes = require(cfg, "omega_boxes", list)
    out = []
    for i, b in enumerate(boxes):
        if not (isinstance(b, list) and len(b) == 2 and all(isinstance(v, list) and len(v) == dim for v in b)):
            raise ConfigError(f"config field 'omega_boxes[{i}]' must be [[lower...], [upper...]] with {dim} entries")
        out.append((tuple(b[0]), tuple(b[1])))
    return out


def run_exhaustion(cfg: dict, ctx: Context) -> None:
    f = _load(read_field, ctx, cfg, "field_file")
    if isinstance(f, RegionMask):
        raise ConfigError("config field 'field_file' must hold a field")
    boxes = _boxes(cfg, f.grid.dim)
    try:
        d, wall = _timed(
            exhaustion, f, boxes, int(require(cfg, "k", int)), float(require(cfg, "p", (int, float))),
            J=cfg.get("J"), alpha_cap=float(cfg.get("alpha_cap", 2.0**40)), ladder=load_ladder(cfg, f.grid),
            eps_c=cfg.get("eps_c"), padding=float(cfg.get("padding", 0.5)), solver=solver_options(cfg),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    nested = all(a.issubset(b) for a, b in zip(d.C, d.C[1:]))
    disjoint = all(not (d.residual & c).count for c in d.C)
    ctx.check(nested, "exhaustion sets C_l are not nested")
    ctx.check(disjoint, "residual meets some C_l")
    d.save(ctx.out_dir / "exhaustion")
    ctx.emit("exhaustion", {**d.record(), "nested": nested, "manifest": "exhaustion/manifest.json"}, wall)


def _exhaustion_masks(ctx: Context, cfg: dict) -> list[RegionMask] | None:
    if "exhaustion_manifest" not in cfg:
        return None
    path = resolve_path(ctx, cfg["exhaustion_manifest"], "exhaustion_manifest")
    try:
        manifest = json.loads(path.read_text())
        return [read_mask(path.parent / name) for name in manifest["files"]["C"]]
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"config field 'exhaustion_manifest': cannot read {path}: {exc}") from exc


def run_area(cfg: dict, ctx: Context) -> None:
    phi = _load(read_vector_field, ctx, cfg, "phi_file")
    weight = _load(read_scalar_field, ctx, cfg, "f_file") if "f_file" in cfg else None
    domain = _load(read_mask, ctx, cfg, "mask_file") if "mask_file" in cfg else None
    removed = _load(read_mask, ctx, cfg, "s_file") if "s_file" in cfg else None
    ex = _exhaustion_masks(ctx, cfg)
    try:
        if ex is not None and domain is not None:
            ex = [m & domain for m in ex]
        prob = MappingProblem(phi, weight, domain, removed, ex)
        report, wall = _timed(
            verify_area_formula, prob, cfg.get("hy"), float(cfg.get("subdivision_floor", 1e-3)), cfg.get("merge_radius")
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ctx.check(report.valid, "too many degenerate fibers")
    for name in ("partial_lhs", "partial_rhs"):
        seq = getattr(report, name)
        ctx.check(all(a <= b for a, b in zip(seq, seq[1:])), f"{name} is not nondecreasing")
    tol = cfg.get("tolerance")
    if tol is not None:
        ctx.check(report.rel_error <= float(tol), f"rel_error {report.rel_error:.3g} exceeds tolerance {tol}")
    ctx.emit("area", report.record(), wall)


def _random_node(rng, shape, margin):
    return tuple(int(rng.integers(margin, k - margin)) for k in shape)


def run_chain_checks(cfg: dict, ctx: Context) -> None:
    f = _load(read_scalar_field, ctx, cfg, "field_file")
    grid = f.grid
    checks = int(cfg.get("checks", 100))
    calibration = int(cfg.get("calibration", 100))
    safety = float(cfg.get("safety", 2.0))
    quantile = float(cfg.get("level_quantile", 0.5))
    t = time.perf_counter()
    ladder = load_ladder(cfg, grid)
    Mg = gradient_maximal(f, ladder)
    rep = precise_representative(f, eps_c=cfg.get("eps_c"))
    alpha = float(cfg.get("alpha", np.quantile(Mg.values, quantile)))
    A = sublevel_set(Mg, alpha) - rep.nonconvergent
    nodes = np.argwhere(A.flags)
    if len(nodes) < 2:
        raise ConfigError(f"A_alpha minus N has fewer than 2 nodes at alpha = {alpha}")
    rng = np.random.default_rng(ctx.seed)
    h = grid.spacing
    rmax = float(cfg.get("r_max", 8.0)) * h

    def draw():
        while True:
            i, j = rng.choice(len(nodes), size=2, replace=False)
            x, y = tuple(nodes[i]), tuple(nodes[j])
            if np.linalg.norm((nodes[i] - nodes[j]) * h) <= rmax:
                break
        r = float(rng.uniform(2 * h, rmax))
        s = float(rng.uniform(h, r * 0.9))
        return chain_estimate_check(f, x, y, r, s, alpha, rep=rep, grad_maximal=Mg)

    calib = [draw() for _ in range(calibration)]
    consts = calibrate_chain_constants(calib, safety)
    tests = [draw() for _ in range(checks)]
    violations = [0, 0, 0]
    for rec in tests:
        for i, (ratio, c) in enumerate(zip(rec.ratios(), consts)):
            if ratio > c:
                violations[i] += 1
    bound = 4.0**grid.dim
    ctx.check(sum(violations) == 0, f"chain estimate violations {violations}")
    ctx.check(max(consts) <= bound, f"calibrated constants {consts} exceed 4^n")
    ctx.emit("chain_checks", {
        "alpha": alpha,
        "constants": list(consts),
        "violations": violations,
        "checks": checks,
        "calibration": calibration,
        "bound": bound,
    }, time.perf_counter() - t)


def run_identity_checks(cfg: dict, ctx: Context) -> None:
    f = _load(read_scalar_field, ctx, cfg, "field_file")
    grid = f.grid
    x = tuple(int(v) for v in cfg.get("x", [(k - 1) // 2 for k in grid.shape]))
    if len(x) != grid.dim:
        raise ConfigError("config field 'x' must have one index per axis")
    h = grid.spacing
    r = float(cfg.get("r", 8 * h))
    delta = float(cfg.get("delta", 4 * h))
    t = time.perf_counter()
    try:
        tel = telescoping_identity_check(f, x, r, delta)
        poin = poincare_check(f, x, r)
        payload = {
            "telescoping": {"lhs": tel.lhs, "rhs": tel.rhs, "residual": tel.residual},
            "poincare": {"lhs": poin.lhs, "rhs_unit": poin.rhs_unit, "ratio": poin.ratio},
        }
        if "k" in cfg:
            kin = kernel_inequality_check(f, int(cfg["k"]), float(cfg.get("ell", 1.0)), x, cfg.get("p"))
            payload["kernel_inequality"] = {"lhs": kin.lhs, "rhs_unit": kin.rhs_unit, "ratio": kin.ratio}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ctx.emit("identity_checks", payload, time.perf_counter() - t)


RUNNERS: dict[str, Callable[[dict, Context], None]] = {
    "maximal": run_maximal,
    "potential": run_potential,
    "capacity": run_capacity,
    "weak_type": run_weak_type,
    "truncation": run_truncation,
    "exhaustion": run_exhaustion,
    "area": run_area,
    "chain_checks": run_chain_checks,
    "identity_checks": run_identity_checks,
}


def run_experiment(cfg: dict, ctx: Context) -> None:
    kind = cfg.get("kind")
    if kind not in RUNNERS:
        raise ConfigError(f"config field 'kind' must be one of {', '.join(RUNNERS)}; got {kind!r}")
    try:
        RUNNERS[kind](cfg, ctx)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from exc
