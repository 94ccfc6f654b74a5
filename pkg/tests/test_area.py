import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from areacap.area import (
    MappingProblem,
    YGrid,
    image_bounds,
    jacobian,
    lhs_integral,
    multiplicity,
    preimages,
    rhs_integral,
    verify_area_formula,
    y_grid,
)
from areacap.builtins import fold1d, fold2d, identity_map, linear_map, make_grid
from areacap.grid import RegionMask, ScalarField, VectorField


def shoelace(points):
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def boundary_loop(values):
    """Image of the grid boundary, walked counter-clockwise."""
    return np.concatenate([values[:, 0], values[-1, 1:], values[-2::-1, -1], values[0, -2:0:-1]])


def twist_map(g):
    x = g.coordinates()
    u = x[..., 0] + 0.2 * x[..., 0] ** 3 + 0.1 * np.sin(x[..., 1])
    v = x[..., 1] + 0.15 * x[..., 0] * x[..., 1]
    return VectorField(g, np.stack([u, v], axis=-1))


# ---- Jacobian


def test_jacobian_identity_and_linear():
    g = make_grid(2, 9)
    np.testing.assert_allclose(jacobian(identity_map(g)).values, 1.0, atol=1e-14)
    M = [[2.0, 0.5], [-1.0, 3.0]]
    np.testing.assert_allclose(jacobian(linear_map(g, M, (0.3, -0.1))).values, np.linalg.det(M), rtol=1e-12)
    g3 = make_grid(3, 6)
    M3 = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 2.0]])
    np.testing.assert_allclose(jacobian(linear_map(g3, M3)).values, np.linalg.det(M3), rtol=1e-12)


def test_jacobian_of_fold():
    for nodes in (33, 65):
        g = make_grid(2, nodes)
        J = jacobian(fold2d(g)).values
        x = g.coordinates()[..., 0]
        assert np.max(np.abs(J - 2 * x)) <= 10 * g.spacing**2


def test_jacobian_needs_square_map():
    g = make_grid(2, 6)
    with pytest.raises(ValueError):
        jacobian(VectorField(g, np.zeros(g.shape + (3,))))


# ---- problem validation


def test_problem_validation():
    g = make_grid(2, 9)
    phi = identity_map(g)
    with pytest.raises(ValueError, match="nonnegative"):
        MappingProblem(phi, weight=ScalarField(g, -np.ones(g.shape)))
    inner = RegionMask.ball(g, (0, 0), 0.3)
    outer = RegionMask.ball(g, (0, 0), 0.6)
    with pytest.raises(ValueError, match="nondecreasing"):
        MappingProblem(phi, exhaustion=[outer, inner])
    with pytest.raises(ValueError, match="inside the domain"):
        MappingProblem(phi, domain=inner, exhaustion=[outer])
    with pytest.raises(ValueError):
        MappingProblem(VectorField(g, np.zeros(g.shape)))
    prob = MappingProblem(phi, domain=outer, removed=inner)
    assert prob.effective == outer - inner


# ---- left side


def test_lhs_examples():
    g = make_grid(2, 65, 0.0, 1.0)
    assert abs(lhs_integral(MappingProblem(identity_map(g))) - 1.0) <= 2 * g.spacing + g.spacing**2
    g1 = make_grid(1, 101, 0.0, 1.0)
    double = VectorField(g1, 2 * g1.coordinates())
    assert abs(lhs_integral(MappingProblem(double)) - 2.0) <= 2 * g1.spacing * (1 + 1e-9)
    g2 = make_grid(1, 201)
    assert abs(lhs_integral(MappingProblem(fold1d(g2))) - 2.0) <= 4 * g2.spacing


# ---- multiplicity


def test_multiplicity_identity_reads_weight():
    g = make_grid(2, 17)
    x = g.coordinates()
    w = ScalarField(g, 2.0 + x[..., 0] - 0.5 * x[..., 1])
    prob = MappingProblem(identity_map(g), weight=w)
    # preimages are located to within floor * h
    for y in [(0.1, 0.3), (-0.55, 0.8)]:
        assert multiplicity(prob, y) == pytest.approx(2.0 + y[0] - 0.5 * y[1], abs=2e-3 * g.spacing)


def test_multiplicity_of_fold():
    g = make_grid(1, 201)
    prob = MappingProblem(fold1d(g))
    assert multiplicity(prob, [0.25]) == 2.0
    assert multiplicity(prob, [5.0]) == 0.0
    assert multiplicity(prob, [-0.5]) == 0.0
    g2 = make_grid(2, 33)
    prob2 = MappingProblem(fold2d(g2))
    assert multiplicity(prob2, [0.25, 0.1]) == 2.0
    assert multiplicity(prob2, [3.0, 0.0]) == 0.0


def test_multiplicity_respects_mask():
    g = make_grid(1, 201)
    prob = MappingProblem(fold1d(g))
    right = RegionMask.box(g, (0.0,), (1.0,))
    assert multiplicity(prob, [0.25], mask=right) == 1.0


def test_preimage_positions():
    g = make_grid(1, 101)
    pre = preimages(MappingProblem(fold1d(g)), np.array([[0.49]]))
    np.testing.assert_allclose(np.sort(pre.position[:, 0]), [-0.7, 0.7], atol=g.spacing**2)


def test_degenerate_fiber():
    g = make_grid(1, 41)
    x = g.coordinates()[..., 0]
    prob = MappingProblem(VectorField(g, np.maximum(x, 0.0)))
    with pytest.raises(ValueError, match="degenerate fiber"):
        multiplicity(prob, [0.0])
    for dim in (1, 2):
        gg = make_grid(dim, 9)
        flat = MappingProblem(VectorField(gg, np.full(gg.shape + (dim,), 0.3)))
        report = verify_area_formula(flat, hy=0.1)
        assert report.degenerate_samples >= 1 and not report.valid


def test_three_dimensional_counting_is_out_of_scope():
    g = make_grid(3, 5)
    with pytest.raises(ValueError):
        preimages(MappingProblem(identity_map(g)), np.zeros((1, 3)))


# ---- right side


def test_y_grid_covers_image():
    g = make_grid(2, 17)
    prob = MappingProblem(fold2d(g))
    lo, hi = image_bounds(prob)
    yg = y_grid(prob, 0.05)
    pts = yg.points()
    assert np.all(pts.min(axis=0) < lo) and np.all(pts.max(axis=0) > hi)
    assert all(s <= 0.05 + 1e-15 for s in yg.spacing)
    with pytest.raises(ValueError):
        YGrid.covering(lo, hi, 0.0)


def test_rhs_identity():
    for dim, nodes in ((1, 65), (2, 65)):
        g = make_grid(dim, nodes, 0.0, 1.0)
        rhs = rhs_integral(MappingProblem(identity_map(g)))
        assert abs(rhs - 1.0) <= dim * g.spacing * 2


def test_rhs_fold_1d():
    g = make_grid(1, 2001)
    assert rhs_integral(MappingProblem(fold1d(g)), hy=1e-3) == pytest.approx(2.0, rel=0.01)


def test_rhs_fold_2d():
    # every node owns a full cell, so the sums cover [-1 - h/2, 1 + h/2]^2
    g = make_grid(2, 129)
    report = verify_area_formula(MappingProblem(fold2d(g)))
    e = 1 + g.spacing / 2
    assert report.lhs == pytest.approx(2 * e * e * 2 * e, rel=1e-3)
    assert report.rel_error <= 0.02


@pytest.mark.parametrize("maker,hy", [(fold1d, 0.01), (fold2d, 0.05)])
def test_rhs_stable_under_halving_hy(maker, hy):
    dim = 1 if maker is fold1d else 2
    g = make_grid(dim, 129 if dim == 2 else 1001)
    prob = MappingProblem(maker(g))
    a = rhs_integral(prob, hy=hy)
    b = rhs_integral(prob, hy=hy / 2)
    assert abs(a - b) <= 0.005 * b


def test_injective_map():
    g = make_grid(2, 97)
    phi = twist_map(g)
    report = verify_area_formula(MappingProblem(phi), hy=0.02)
    assert set(report.histogram) <= {0, 1}
    # image of the boundary of the node cells, [-1 - h/2, 1 + h/2]^2
    fine = make_grid(2, 2001, -1 - g.spacing / 2, 1 + g.spacing / 2)
    area = shoelace(boundary_loop(twist_map(fine).values))
    assert report.lhs == pytest.approx(area, rel=0.02)
    assert report.rel_error <= 0.02


# ---- full report


def test_identity_report():
    g = make_grid(2, 64, 0.0, 1.0)
    report = verify_area_formula(MappingProblem(identity_map(g)))
    assert report.rel_error <= 1e-3 and report.valid
    rec = report.record()
    assert rec["lhs"] == report.lhs and rec["histogram"]


def test_weight_supported_off_the_domain():
    g = make_grid(2, 33)
    left = RegionMask.box(g, (-1, -1), (-0.1, 1))
    w = ScalarField(g, (~left).flags.astype(float))
    report = verify_area_formula(MappingProblem(identity_map(g), weight=w, domain=RegionMask.box(g, (-1, -1), (-0.5, 1))))
    assert report.lhs == 0.0 and report.rhs == 0.0


def test_removed_set_and_exhaustion_partials():
    g = make_grid(2, 65)
    phi = fold2d(g)
    masks = [RegionMask.box(g, (-r, -r), (r, r)) for r in (0.25, 0.5, 0.75, 1.0)]
    removed = RegionMask.ball(g, (0.5, 0.5), 0.1)
    prob = MappingProblem(phi, removed=removed, exhaustion=masks)
    report = verify_area_formula(prob, hy=0.04)
    pl, pr = report.partial_lhs, report.partial_rhs
    assert all(a <= b for a, b in zip(pl, pl[1:])) and all(a <= b for a, b in zip(pr, pr[1:]))
    assert pl[-1] == report.lhs and pr[-1] == report.rhs
    assert report.removed_nodes == removed.count
    full = verify_area_formula(MappingProblem(phi), hy=0.04)
    assert report.lhs < full.lhs


@settings(max_examples=10)
@given(st.floats(0.3, 3.0), st.floats(-1.0, 1.0), st.floats(0.3, 3.0))
def test_linear_maps_scale_area(a, b, d):
    g = make_grid(2, 65, 0.0, 1.0)
    M = [[a, b], [0.0, d]]
    # y-spacing follows the thinnest image direction
    report = verify_area_formula(MappingProblem(linear_map(g, M)), hy=g.spacing * min(a, d) / 2)
    assert report.lhs == pytest.approx(abs(a * d) * (1 + g.spacing) ** 2, rel=1e-9)
    assert report.rel_error <= 0.02
