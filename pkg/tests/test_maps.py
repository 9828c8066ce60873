from __future__ import annotations

import math

import numpy as np
import pytest

from qslab.affine import AffineMap
from qslab.cubes import DyadicCube, RootFrame, root_cube, unit_root
from qslab.maps import (
    affine_test_map,
    analytic_map,
    empirical_eta,
    finite_diff_gradient,
    holder_fit,
    identity_map,
    image_diam,
    kahane_cdf,
    kahane_map,
    oscillation_branch_map,
    read_sampled_csv,
    sample_to_grid,
    sampled_map,
    snowflake_map,
    vortex_branch_map,
    windowed_field,
    write_sampled_csv,
)

UNIT_1D = root_cube(unit_root(1))
UNIT_2D = root_cube(unit_root(2))


def test_kahane_cdf_measure_values():
    assert kahane_cdf(0.0, 0.1) == 0.0
    assert kahane_cdf(1.0, 0.1) == 1.0
    assert kahane_cdf(1.0 / 3.0, 0.1) == pytest.approx(0.1, abs=1e-12)
    assert kahane_cdf(2.0 / 3.0, 0.1) == pytest.approx(0.9, abs=1e-12)
    assert kahane_cdf(1.0 / 9.0, 0.1) == pytest.approx(0.01, abs=1e-12)
    # integer periodization
    assert kahane_cdf(2.0 + 1.0 / 3.0, 0.1) == pytest.approx(2.1, abs=1e-12)
    assert kahane_cdf(-1.0 + 1.0 / 3.0, 0.1) == pytest.approx(-0.9, abs=1e-12)


def test_kahane_cdf_monotone_and_self_similar():
    rng = np.random.default_rng(3)
    x = np.sort(rng.uniform(0, 1, size=10_000))
    f = kahane_cdf(x, 0.1)
    assert np.all(np.diff(f) > 0), "CDF must be strictly increasing"
    y = rng.uniform(0, 1, size=1000)
    gap = kahane_cdf(y / 3.0, 0.1) - 0.1 * kahane_cdf(y, 0.1)
    assert np.abs(gap).max() < 1e-12
    with pytest.raises(ValueError):
        kahane_cdf(0.5, 0.4)


def test_eval_examples():
    ident = identity_map(2)
    assert np.allclose(ident.eval([0.25, 0.75]), [0.25, 0.75])
    aff = affine_test_map(AffineMap([[2.0]], [1.0]))
    assert aff.eval([0.5])[0] == pytest.approx(2.0)
    km = kahane_map(0.1)
    assert km.eval([1.0 / 3.0])[0] == pytest.approx(0.1, abs=1e-12)


def test_image_diam_examples():
    assert image_diam(identity_map(2), UNIT_2D, 3) == pytest.approx(math.sqrt(2))
    aff = affine_test_map(AffineMap([[2.0]], [1.0]))
    assert image_diam(aff, UNIT_1D, 2) == pytest.approx(2.0)
    third = root_cube(RootFrame((0.0,), 1.0 / 3.0))
    assert image_diam(kahane_map(0.1), third, 3) == pytest.approx(0.1, abs=1e-12)


def test_image_diam_monotone_on_builtins():
    km = kahane_map(0.15)
    vals = [image_diam(km, UNIT_1D, m) for m in (1, 2, 3, 4)]
    assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))
    # nested cubes, same absolute density: child diameter no larger
    child = DyadicCube(1, (0,), UNIT_1D.root)
    assert image_diam(km, child, 3) <= image_diam(km, UNIT_1D, 4) + 1e-15


def test_holder_fit_identity():
    fit = holder_fit(identity_map(1), UNIT_1D, 500)
    assert fit.alpha == pytest.approx(1.0)
    assert fit.residual == 0.0
    # the stated bracket holds with C = 1 at alpha = 1
    assert fit.feasible_c(1.0) <= 1.0


def test_holder_fit_square_map():
    sq = analytic_map(lambda p: p ** 2, 1, 1, label="xsq")
    k = root_cube(RootFrame((1.0,), 1.0))
    fit = holder_fit(sq, k, 500)
    assert fit.feasible_c(1.0) <= 4.0 / 3.0
    assert fit.residual < 0.01


def test_holder_fit_kahane():
    fit = holder_fit(kahane_map(0.1), UNIT_1D, 1000)
    assert fit.alpha < 1.0
    assert fit.residual < 0.05


def test_holder_fit_rejects_constant():
    const = analytic_map(lambda p: np.zeros((p.shape[0], 1)), 1, 1, label="const")
    with pytest.raises(ValueError, match="degenerate image"):
        holder_fit(const, UNIT_1D, 200)


def test_empirical_eta_affine_is_exact():
    # similarities preserve distance ratios exactly: 1-d affine and a
    # scaled rotation in the plane
    aff = affine_test_map(AffineMap([[2.0]], [1.0]))
    table = empirical_eta(aff, UNIT_1D, 2000)
    assert np.abs(table[:, 1] - table[:, 0]).max() < 1e-9
    c, s = math.cos(0.7), math.sin(0.7)
    rot = affine_test_map(AffineMap([[3.0 * c, -3.0 * s], [3.0 * s, 3.0 * c]], [1.0, -2.0]))
    table2 = empirical_eta(rot, UNIT_2D, 2000)
    assert np.abs(table2[:, 1] - table2[:, 0]).max() < 1e-9
    ident = empirical_eta(identity_map(1), UNIT_1D, 1000)
    assert np.abs(ident[:, 1] - ident[:, 0]).max() < 1e-9


def test_empirical_eta_kahane_distortion():
    table = empirical_eta(kahane_map(0.1), UNIT_1D, 2000)
    near_one = table[np.isclose(table[:, 0], 1.0, atol=0.05)]
    assert near_one.size and near_one[:, 1].max() >= 8.0
    assert np.all(np.diff(table[:, 1]) >= 0), "envelope must be nondecreasing"


def test_empirical_eta_scaling_invariance():
    # power-of-two scale: the image ratios cancel bitwise
    km = kahane_map(0.2)
    scaled = analytic_map(
        lambda p: 32.0 * kahane_cdf(p[:, 0], 0.2)[:, None], 1, 1, label="scaled"
    )
    t1 = empirical_eta(km, UNIT_1D, 1500)
    t2 = empirical_eta(scaled, UNIT_1D, 1500)
    assert t1.shape == t2.shape
    assert np.abs(t1 - t2).max() < 1e-12


def test_empirical_eta_rejects_collisions():
    collapse = analytic_map(
        lambda p: np.floor(2.0 * p), 1, 1, label="collapse"
    )
    with pytest.raises(ValueError, match="not an embedding"):
        empirical_eta(collapse, UNIT_1D, 1000)


def test_finite_diff_gradient():
    aff = affine_test_map(AffineMap([[2.0, -1.0], [0.5, 3.0]], [0.0, 1.0]))
    J = finite_diff_gradient(aff, [0.3, 0.4], 1e-3)
    assert np.abs(J - np.array([[2.0, -1.0], [0.5, 3.0]])).max() < 1e-12
    sq = analytic_map(lambda p: p ** 2, 1, 1, label="xsq")
    J2 = finite_diff_gradient(sq, [0.5], 1e-4)
    assert J2[0, 0] == pytest.approx(1.0, abs=1e-7)
    ident = identity_map(3)
    assert np.allclose(finite_diff_gradient(ident, [0.1, 0.2, 0.3], 1e-5), np.eye(3))


def test_finite_diff_onesided_fallback_near_window():
    field = windowed_field("bump", 1)
    flags: list[int] = []
    J = finite_diff_gradient(field, [1e-6], 1e-4, onesided=flags)
    assert flags == [0]
    assert np.isfinite(J).all()


def test_windowed_fields_vanish_on_boundary():
    for name in ("bump", "ripple", "well"):
        for d in (1, 2):
            field = windowed_field(name, d)
            edge = np.zeros((1, d))
            assert abs(field.eval_many(edge)[0, 0]) < 1e-14
            assert np.abs(field.jacobian_many(edge)).max() < 1e-14
            mid = np.full((1, d), 0.37)
            fd = finite_diff_gradient(field, mid[0], 1e-6)
            an = field.jacobian_many(mid)[0]
            assert np.abs(fd - an).max() < 1e-5


def test_window_enforcement():
    field = windowed_field("bump", 2)
    with pytest.raises(ValueError, match="outside the domain window"):
        field.eval_many(np.array([[1.5, 0.5]]))


def test_sampled_map_reproduces_affine_and_round_trips(tmp_path):
    aff = affine_test_map(AffineMap([[1.0, 2.0], [0.0, -1.0]], [0.5, 0.0]))
    values = sample_to_grid(aff, 3)
    sm = sampled_map(values)
    pts = np.random.default_rng(5).uniform(0, 1, size=(50, 2))
    # multilinear interpolation is exact on affine data
    assert np.abs(sm.eval_many(pts) - aff.eval_many(pts)).max() < 1e-12
    path = tmp_path / "grid.csv"
    write_sampled_csv(str(path), values)
    back = read_sampled_csv(str(path))
    assert np.abs(back.eval_many(pts) - sm.eval_many(pts)).max() == 0.0


def test_snowflake_is_bilipschitz_perturbation():
    sf = snowflake_map(2, 0.05, 3)
    pts = np.random.default_rng(11).uniform(0, 1, size=(100, 2))
    jac = sf.jacobian_many(pts)
    fd = finite_diff_gradient(sf, pts[0], 1e-6)
    assert np.abs(fd - jac[0]).max() < 1e-6
    # diagonal entries stay within amplitude*frequency of 1
    diag = jac[:, [0, 1], [0, 1]]
    assert diag.min() > 1.0 - 0.05 * 3 - 1e-12
    assert diag.max() < 1.0 + 0.05 * 3 + 1e-12


def test_fixture_maps_are_identity_outside_branch():
    branch = DyadicCube(2, (1, 2), unit_root(2))
    osc = oscillation_branch_map(branch, 0.1, 2)
    vortex = vortex_branch_map(branch, 0.05)
    # the third point is the branch corner: still identity there
    outside = np.array([[0.05, 0.05], [0.9, 0.1], [0.25, 0.5]])
    assert np.abs(osc.eval_many(outside) - outside).max() < 1e-14
    assert np.abs(vortex.eval_many(outside) - outside).max() < 1e-14
    inside = np.array([[0.30, 0.55], [0.36, 0.61]])
    assert np.abs(osc.eval_many(inside) - inside).max() > 1e-4
    assert np.abs(vortex.eval_many(inside) - inside).max() > 1e-4
