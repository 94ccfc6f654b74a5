import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from areacap.builtins import bump, heaviside, linear, make_grid, oscillatory, radial_singular_map, singular, smooth_random
from areacap.fieldio import read_mask
from areacap.grid import RegionMask, ScalarField, ball_average
from areacap.maximal import RadiusLadder
from areacap.truncation import (
    PreconditionError,
    box_cutoff,
    calibrate_chain_constants,
    chain_estimate_check,
    default_precise_ladder,
    exhaustion,
    gradient_magnitude,
    gradient_maximal,
    gradient_sobolev_norm,
    lebesgue_decay,
    lipschitz_modulus,
    precise_representative,
    smoothstep5,
    threshold_level,
    truncation_sets,
)

# ---- precise representative


def test_default_ladder():
    g1 = make_grid(1, 101)
    assert np.allclose(np.array(default_precise_ladder(g1)) / g1.spacing, [4, 3, 2, 1])
    g2 = make_grid(2, 33)
    radii = default_precise_ladder(g2)
    # squared shell radii 16, 13, 10, 9, 8, 5, 4, 2, 1
    assert np.allclose((np.array(radii) / g2.spacing) ** 2, [16, 13, 10, 9, 8, 5, 4, 2, 1])


def test_continuous_field_has_no_bad_nodes():
    g = make_grid(1, 2001)
    f = bump(g, radius=0.6)
    rep = precise_representative(f)
    assert rep.nonconvergent.is_empty()
    lip = np.max(np.abs(np.diff(f.values))) / g.spacing
    assert np.max(np.abs(rep.values.values - f.values)) <= 2 * lip * g.spacing


def test_jump_node_takes_the_midpoint():
    g = make_grid(1, 201)
    rep = precise_representative(heaviside(g))
    origin = g.nearest_index((0.0,))
    assert not rep.nonconvergent.flags[origin]
    assert rep.values.values[origin] == pytest.approx(0.5, abs=1e-12)


def test_oscillation_is_flagged():
    g = make_grid(1, 2001)
    rep = precise_representative(oscillatory(g), ladder=default_precise_ladder(g))
    origin = g.nearest_index((0.0,))
    assert rep.nonconvergent.flags[origin]
    assert rep.values.values[origin] == 0.0


def test_constant_field_converges_everywhere():
    g = make_grid(2, 9)
    rep = precise_representative(ScalarField(g, np.full(g.shape, 2.0)))
    assert rep.tolerance == 0.0 and rep.nonconvergent.is_empty()
    np.testing.assert_allclose(rep.values.values, 2.0, rtol=1e-14)


def test_ladder_validation():
    g = make_grid(1, 33)
    f = bump(g)
    with pytest.raises(ValueError):
        precise_representative(f, ladder=[4 * g.spacing, 2 * g.spacing, g.spacing])
    with pytest.raises(ValueError):
        precise_representative(f, ladder=[g.spacing * s for s in (1, 2, 3, 4)])
    with pytest.raises(ValueError):
        precise_representative(f, ladder=[g.spacing * s for s in (4, 3, 2, 0.5)])
    rep = precise_representative(f, ladder=RadiusLadder.for_grid(g, r_max=4 * g.spacing))
    assert rep.radii[-1] == pytest.approx(g.spacing)


# ---- truncation sets


def test_linear_gradient_level():
    g = make_grid(2, 17)
    f = linear(g, (0.6, 0.8))
    full, empty = truncation_sets(f, [1.0 + 1e-9, 1.0 - 1e-9])
    assert full.count == g.size and empty.is_empty()


def test_gradient_magnitude_of_map_is_frobenius():
    from areacap.builtins import linear_map

    g = make_grid(2, 9)
    F = linear_map(g, [[1.0, 2.0], [2.0, 4.0]])
    np.testing.assert_allclose(gradient_magnitude(F).values, 5.0, rtol=1e-12)


@given(st.lists(st.floats(0.05, 20), min_size=2, max_size=6), st.integers(0, 30))
def test_truncation_sets_nest(levels, seed):
    g = make_grid(2, 17)
    levels = sorted(levels)
    sets = truncation_sets(smooth_random(g, seed=seed), levels)
    assert all(a.issubset(b) for a, b in zip(sets, sets[1:]))


def test_singularity_excluded_below_its_level():
    g = make_grid(1, 2001)
    f = singular(g, gamma=0.5, mollify=2.0)
    Mg = gradient_maximal(f)
    origin = g.nearest_index((0.0,))
    top = Mg.values[origin]
    for a in (0.1 * top, 0.5 * top, 0.99 * top):
        assert not truncation_sets(f, [a], grad_maximal=Mg)[0].flags[origin]
    assert truncation_sets(f, [top], grad_maximal=Mg)[0].flags[origin]


# ---- chain estimates


def test_chain_constant_field():
    g = make_grid(2, 17)
    f = ScalarField(g, np.full(g.shape, 1.5))
    rec = chain_estimate_check(f, (8, 8), (9, 7), 3 * g.spacing, 2 * g.spacing, 1.0)
    assert rec.ratios() == (0.0, 0.0, 0.0)


def test_chain_linear_shifted_balls():
    g = make_grid(2, 33)
    a = np.array([0.3, -0.4])
    f = linear(g, a)
    rec = chain_estimate_check(f, (10, 12), (14, 15), 4 * g.spacing, 2 * g.spacing, 0.5 * (1 + 1e-12))
    d = np.linalg.norm(g.node((10, 12)) - g.node((14, 15)))
    assert rec.shifted.lhs == pytest.approx(abs(a @ (g.node((10, 12)) - g.node((14, 15)))), abs=1e-12)
    assert rec.shifted.rhs_unit == pytest.approx(d * 0.5)
    assert rec.shifted.ratio <= 1.0


def test_chain_precondition():
    g = make_grid(1, 201)
    f = singular(g, gamma=0.5)
    origin = g.nearest_index((0.0,))
    with pytest.raises(PreconditionError, match="precondition violated"):
        chain_estimate_check(f, origin, (origin[0] + 3,), 4 * g.spacing, 2 * g.spacing, 0.1)
    with pytest.raises(ValueError):
        chain_estimate_check(f, (5,), (7,), g.spacing, 2 * g.spacing, 1.0)


def test_calibration_and_held_out_checks():
    rng = np.random.default_rng(5)

    def draw(seed):
        g = make_grid(2, 33)
        f = smooth_random(g, seed=seed)
        M = gradient_maximal(f)
        rep = precise_representative(f)
        alpha = float(np.quantile(M.values, 0.75))
        nodes = np.argwhere((RegionMask(g, M.values <= alpha) - rep.nonconvergent).flags)
        while True:
            i, j = rng.choice(len(nodes), 2, replace=False)
            if 0 < np.abs(nodes[i] - nodes[j]).max() <= 6:
                break
        r = float(rng.uniform(2, 6)) * g.spacing
        s = float(rng.uniform(1, 0.9 * r / g.spacing)) * g.spacing
        return chain_estimate_check(f, nodes[i], nodes[j], r, s, alpha, rep=rep, grad_maximal=M)

    consts = calibrate_chain_constants([draw(500 + k) for k in range(30)])
    assert max(consts) <= 4.0**2
    held_out = np.array([draw(k).ratios() for k in range(30)])
    assert np.all(held_out <= np.asarray(consts))
    with pytest.raises(ValueError):
        calibrate_chain_constants([])


# ---- Lipschitz modulus


@pytest.mark.parametrize("dim,nodes", [(1, 101), (2, 25)])
def test_modulus_of_linear(dim, nodes):
    # the gradient points along the lattice direction (3, -4), so some node
    # pair realises |a|; the mask keeps balls away from the box edge
    g = make_grid(dim, nodes)
    a = (1.5, -2.0)[:dim]
    rep = precise_representative(linear(g, a, 1.0))
    inner = RegionMask.box(g, (-0.6,) * dim, (0.6,) * dim)
    assert lipschitz_modulus(rep, inner) == pytest.approx(np.linalg.norm(a), abs=1e-10)


def test_modulus_of_constant_and_small_masks():
    g = make_grid(2, 9)
    rep = precise_representative(ScalarField(g, np.ones(g.shape)))
    assert lipschitz_modulus(rep, RegionMask.full(g)) <= 1e-12
    one = np.zeros(g.shape, dtype=bool)
    one[3, 3] = True
    with pytest.raises(ValueError):
        lipschitz_modulus(rep, RegionMask(g, one))


def test_sampled_modulus_is_seeded_lower_bound():
    g = make_grid(2, 161)
    f = smooth_random(g, seed=3)
    rep = precise_representative(f, eps_c=0.0)
    mask = RegionMask.full(g)
    a = lipschitz_modulus(rep, mask, pairs=5000, seed=1)
    assert a == lipschitz_modulus(rep, mask, pairs=5000, seed=1)
    sub = RegionMask.box(g, (-0.3, -0.3), (0.3, 0.3))
    assert a <= np.max(gradient_magnitude(f).values) * 1.01
    assert lipschitz_modulus(rep, sub) > 0


def test_modulus_grows_linearly_in_level():
    g = make_grid(1, 4001)
    f = singular(g, gamma=0.5, mollify=2.0, amplitude=0.5)
    Mg = gradient_maximal(f)
    rep = precise_representative(f)
    levels = (1.0, 2.0, 4.0, 8.0)
    ratios = [lipschitz_modulus(rep, A) / a for a, A in zip(levels, truncation_sets(f, levels, grad_maximal=Mg))]
    assert max(ratios) / min(ratios) <= 2.5


# ---- cutoffs and thresholds


def test_smoothstep_is_c2():
    t = np.linspace(0, 1, 10001)
    s = smoothstep5(t)
    assert s[0] == 0.0 and s[-1] == 1.0
    ds = 30 * t**2 * (1 - t) ** 2
    d2 = 60 * t * (1 - t) * (1 - 2 * t)
    np.testing.assert_allclose(np.gradient(s, t), ds, atol=1e-6)
    assert ds[0] == ds[-1] == d2[0] == d2[-1] == 0.0
    assert np.all(np.diff(s) >= 0)
    assert smoothstep5(np.array([-1.0, 2.0])).tolist() == [0.0, 1.0]


def test_box_cutoff():
    g = make_grid(2, 41)
    z = box_cutoff(g, ((-0.3, -0.3), (0.3, 0.3)), ((-0.6, -0.6), (0.6, 0.6))).values
    inner = RegionMask.box(g, (-0.3, -0.3), (0.3, 0.3)).flags
    outside = ~RegionMask.box(g, (-0.6, -0.6), (0.6, 0.6)).flags
    np.testing.assert_allclose(z[inner], 1.0, atol=1e-12)
    assert np.all(z[outside] == 0.0)
    assert np.all((z >= 0) & (z <= 1))
    with pytest.raises(ValueError):
        box_cutoff(g, ((-0.6, -0.6), (0.6, 0.6)), ((-0.3, -0.3), (0.3, 0.3)))


@given(st.floats(1e-6, 1e6), st.integers(1, 8), st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_threshold_is_smallest_power_of_two(norm, j, p):
    a = threshold_level(norm, j, p)
    e = math.log2(a)
    assert e == int(e)
    assert a**p >= 2.0**j * norm**p * (1 - 1e-12)
    assert (a / 2) ** p < 2.0**j * norm**p * (1 + 1e-12)


def test_threshold_for_zero_norm():
    assert threshold_level(0.0, 3, 1.5) == 1.0


def test_gradient_sobolev_norm_linear():
    g = make_grid(2, 33, 0.0, 1.0)
    f = linear(g, (3.0, 4.0))
    area = g.size * g.cell_volume
    assert gradient_sobolev_norm(f, 1, 1.0) == pytest.approx(7.0 * area, rel=1e-12)
    assert gradient_sobolev_norm(f, 2, 2.0) == pytest.approx(5.0 * math.sqrt(area), rel=1e-10)


# ---- exhaustion

L = 0.003
FRACTIONS = (0.25, 0.4, 0.55, 0.7, 0.85, 0.95)


@pytest.fixture(scope="module")
def singular_map():
    g = make_grid(2, 129, -L, L)
    return g, radial_singular_map(g, gamma=0.5, mollify=2.0), [((-f * L,) * 2, (f * L,) * 2) for f in FRACTIONS]


def test_exhaustion_structure(singular_map):
    g, phi, boxes = singular_map
    residuals = {}
    for J in (2, 3, 4):
        dec = exhaustion(phi, boxes, k=2, p=1.0, J=J, capacity=False)
        assert dec.J == J
        assert all(a.issubset(b) for a, b in zip(dec.C, dec.C[1:]))
        for c in dec.C:
            assert (dec.residual & c).is_empty()
        assert dec.residual.issubset(dec.domain)
        assert all(a <= b for a, b in zip(dec.levels, dec.levels[1:]))
        for j, (lvl, nrm) in enumerate(zip(dec.levels, dec.gradient_norms), start=1):
            assert lvl == threshold_level(nrm, j, 1.0)
        residuals[J] = dec.residual
    assert residuals[3].issubset(residuals[2]) and residuals[4].issubset(residuals[3])


def test_residual_capacity_shrinks_with_J(singular_map):
    g, phi, boxes = singular_map
    d3 = exhaustion(phi, boxes, k=2, p=1.0, J=3)
    d5 = exhaustion(phi, boxes, k=2, p=1.0, J=5)
    assert d5.residual_capacity.value <= d3.residual_capacity.value
    assert d3.residual.issubset(RegionMask.ball(g, (0, 0), 3 * g.spacing))


def test_smooth_field_is_covered_at_first_level():
    g = make_grid(2, 33)
    f = ScalarField(g, 0.01 * bump(g, radius=0.9).values)
    boxes = [((-0.5, -0.5), (0.5, 0.5)), ((-0.75, -0.75), (0.75, 0.75))]
    dec = exhaustion(f, boxes, k=1, p=1.0)
    omega1 = RegionMask.box(g, *boxes[0], closed=True)
    assert omega1.issubset(dec.C[0])
    assert dec.residual.is_empty()
    assert dec.residual_capacity is None


def test_exhaustion_errors(singular_map):
    g, phi, boxes = singular_map
    with pytest.raises(ValueError, match="alpha_cap"):
        exhaustion(phi, boxes, k=2, p=1.0, J=3, alpha_cap=16.0)
    with pytest.raises(ValueError):
        exhaustion(phi, boxes[::-1], k=2, p=1.0)
    with pytest.raises(ValueError):
        exhaustion(phi, boxes, k=3, p=1.0)
    with pytest.raises(ValueError):
        exhaustion(phi, boxes, k=2, p=1.0, J=7)


def test_bundle_round_trip(tmp_path, singular_map):
    g, phi, boxes = singular_map
    dec = exhaustion(phi, boxes, k=2, p=1.0, J=3, capacity=False)
    manifest = json.loads(dec.save(tmp_path).read_text())
    assert manifest["J"] == 3 and len(manifest["files"]["C"]) == 3
    assert read_mask(tmp_path / manifest["files"]["S"]) == dec.residual
    assert read_mask(tmp_path / manifest["files"]["C"][1]) == dec.C[1]


def test_lebesgue_decay():
    g = make_grid(1, 20001)
    f = singular(g, gamma=0.5, mollify=2.0)
    rows = lebesgue_decay(f, np.geomspace(1.0, 10.0, 5), 1.9)
    measures = [r.measure for r in rows]
    products = [r.product for r in rows]
    assert all(a >= b for a, b in zip(measures, measures[1:]))
    assert max(products) / min(products) <= 4.0
