import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsl.errors import ConfigError, ShapeError
from rsl.grid import area_weighted_mean, area_weights, make_grid


def test_paper_grid_coordinates():
    g = make_grid(64, 32)
    assert g.latitudes[0] == pytest.approx(-87.1875)
    assert g.latitudes[-1] == pytest.approx(87.1875)
    assert np.allclose(np.diff(g.latitudes), 5.625)
    assert g.longitudes[0] == 0.0
    assert g.longitudes[-1] == pytest.approx(354.375)
    assert np.allclose(np.diff(g.longitudes), 5.625)
    assert 90.0 not in np.abs(g.latitudes)


def test_tiny_grids():
    g = make_grid(4, 2)
    assert np.allclose(g.latitudes, [-45.0, 45.0])
    assert np.allclose(g.longitudes, [0.0, 90.0, 180.0, 270.0])
    g = make_grid(8, 4)
    assert np.allclose(g.latitudes, [-67.5, -22.5, 22.5, 67.5])


@pytest.mark.parametrize("w,h", [(7, 4), (2, 4), (8, 1), (0, 0)])
def test_make_grid_rejects_bad_sizes(w, h):
    with pytest.raises(ConfigError):
        make_grid(w, h)


def test_weights_h2_are_unit():
    g = make_grid(4, 2)
    assert np.allclose(area_weights(g).weights, [1.0, 1.0])


def test_weights_h4_cosine_ratio():
    g = make_grid(8, 4)
    a = area_weights(g).weights
    expect = np.cos(np.deg2rad(22.5)) / np.cos(np.deg2rad(67.5))
    assert a[1] / a[0] == pytest.approx(expect)
    assert expect == pytest.approx(2.4142, abs=1e-4)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(min_value=2, max_value=257))
def test_weights_invariants_any_h(h):
    a = area_weights(make_grid(4, h)).weights
    assert np.all(a > 0)
    assert abs(a.mean() - 1.0) < 1e-12          # sum == H
    assert np.allclose(a, a[::-1], rtol=0, atol=1e-15)


def test_mean_of_constant_is_constant(small_grid):
    w = area_weights(small_grid)
    assert area_weighted_mean(np.full(small_grid.shape, 3.25), w) == pytest.approx(3.25)


def test_mean_antisymmetric_field_is_zero(small_grid):
    w = area_weights(small_grid)
    field = np.ones(small_grid.shape)
    field[: small_grid.n_lat // 2] = -1.0
    assert area_weighted_mean(field, w) == pytest.approx(0.0, abs=1e-15)


def test_mean_single_cell_hand_sum():
    g = make_grid(4, 4)
    w = area_weights(g)
    field = np.zeros((4, 4))
    field[3, 0] = 1.0
    # oracle: direct summation of the defining formula
    expect = (w.weights[:, None] * field).sum() / field.size
    assert area_weighted_mean(field, w) == pytest.approx(expect, rel=1e-14)
    assert expect == pytest.approx(w.weights[3] / 16.0)


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(-5, 5), beta=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_mean_linearity(alpha, beta, seed, small_grid):
    w = area_weights(small_grid)
    r = np.random.default_rng(seed)
    f = r.standard_normal(small_grid.shape)
    g = r.standard_normal(small_grid.shape)
    lhs = area_weighted_mean(alpha * f + beta * g, w)
    rhs = alpha * area_weighted_mean(f, w) + beta * area_weighted_mean(g, w)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_mean_rejects_shape_mismatch(small_grid):
    w = area_weights(small_grid)
    with pytest.raises(ShapeError):
        area_weighted_mean(np.zeros((small_grid.n_lat + 1, small_grid.n_lon)), w)


def test_manifest_round_trip(small_grid):
    from rsl.grid import GridSpec
    d = small_grid.to_manifest()
    g2 = GridSpec.from_manifest(d)
    assert np.array_equal(g2.latitudes, small_grid.latitudes)
    assert g2.n_lon == small_grid.n_lon
