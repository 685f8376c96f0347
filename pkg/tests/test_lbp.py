import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from quasiconf.errors import ConfigError, ShapeError
from quasiconf.lbp import (
    DEFAULT_SCALES, LbpScale, codes_from_differences, lbp_codes, lbp_covariance, lbp_differences,
    lbp_mahalanobis, lbp_multiscale, lbp_neighbors, neighbor_offsets, parse_scales,
)
from quasiconf.synth import mc_oracle_lbp_cov

S18 = LbpScale(1, 8)


@pytest.mark.parametrize("r,p", [(0, 8), (1, 3), (1, 9)])
def test_scale_validation(r, p):
    with pytest.raises(ConfigError):
        LbpScale(r, p)


def test_parse_scales():
    assert parse_scales("1:8,2:16,3:24") == DEFAULT_SCALES
    assert str(LbpScale(2, 16)) == "2:16"
    with pytest.raises(ConfigError):
        parse_scales("1-8")


@pytest.mark.parametrize("sampling", ["lattice", "bilinear"])
@pytest.mark.parametrize("scale", DEFAULT_SCALES)
def test_offsets_start_at_angle_zero_counter_clockwise(scale, sampling):
    off = neighbor_offsets(scale.radius, scale.points, sampling)
    assert off.shape == (scale.points, 2)
    r = scale.radius
    assert tuple(off[0]) == (r, 0)
    q = scale.points // 4
    assert tuple(off[q]) == (0, -r)        # up is counter-clockwise in image rows
    assert tuple(off[2 * q]) == (-r, 0)
    assert tuple(off[3 * q]) == (0, r)
    if sampling == "lattice":
        assert len({tuple(o) for o in off}) == scale.points


def test_constant_image():
    a = np.full((9, 9), 0.3)
    z = lbp_neighbors(a, (4, 4), S18)
    assert not z.any()
    codes = lbp_codes(a, S18)
    assert (codes[1:-1, 1:-1] == 255).all()
    assert (codes[0] == 0).all()


def test_step_edge_p4():
    a = np.zeros((5, 5))
    a[:, 3:] = 1.0
    s = LbpScale(1, 4)
    np.testing.assert_array_equal(lbp_neighbors(a, (2, 2), s), [1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(lbp_neighbors(a, (2, 3), s), [0.0, 0.0, -1.0, 0.0])
    # codes: bit 0 is the angle-0 neighbour, ties set the bit
    assert lbp_codes(a, s)[2, 2] == 0b1111
    assert lbp_codes(a, s)[2, 3] == 0b1011


def test_axis_neighbours_are_exact_raster_values():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(7, 7))
    z = lbp_neighbors(a, (3, 3), LbpScale(2, 16), sampling="bilinear")
    assert z[0] == a[3, 5] - a[3, 3]
    assert z[4] == a[1, 3] - a[3, 3]
    assert z[8] == a[3, 1] - a[3, 3]
    assert z[12] == a[5, 3] - a[3, 3]


def test_bilinear_matches_reference_interpolation():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(9, 9))
    z = lbp_neighbors(a, (4, 4), LbpScale(2, 16), sampling="bilinear")
    for i in range(16):
        t = 2 * np.pi * i / 16
        x, y = 4 + 2 * np.cos(t), 4 - 2 * np.sin(t)
        x0, y0 = int(np.floor(x + 1e-12)), int(np.floor(y + 1e-12))
        tx, ty = x - x0, y - y0
        v = ((1 - tx) * (1 - ty) * a[y0, x0] + tx * (1 - ty) * a[y0, min(x0 + 1, 8)]
             + (1 - tx) * ty * a[min(y0 + 1, 8), x0] + tx * ty * a[min(y0 + 1, 8), min(x0 + 1, 8)])
        assert z[i] == pytest.approx(v - a[4, 4], abs=1e-9)


def test_border_pixel_rejected():
    with pytest.raises(ShapeError):
        lbp_neighbors(np.zeros((9, 9)), (1, 4), LbpScale(2, 16))


def test_all_brighter_and_all_darker():
    a = np.ones((3, 3))
    a[1, 1] = 0.0
    assert lbp_codes(a, S18)[1, 1] == 255
    assert lbp_codes(1 - a, S18)[1, 1] == 0


def test_codes_from_differences_bit_order():
    z = np.array([1.0, -1, -1, -1, -1, -1, -1, 0.0])
    assert codes_from_differences(z) == 1 + 128


def test_covariance_entries_at_sigma_001():
    c = lbp_covariance(0.01, 8)
    assert c.shape == (8, 8)
    np.testing.assert_allclose(np.diag(c), 2e-4)
    np.testing.assert_allclose(c[~np.eye(8, dtype=bool)], 1e-4)


@pytest.mark.parametrize("p", [4, 8, 16, 24])
def test_covariance_spectrum(p):
    s = 0.02
    ev = np.sort(np.linalg.eigvalsh(lbp_covariance(s, p)))
    np.testing.assert_allclose(ev[:-1], s**2, rtol=1e-9)
    assert ev[-1] == pytest.approx((p + 1) * s**2)


@pytest.mark.parametrize("scale", [LbpScale(1, 8), LbpScale(2, 16)])
def test_covariance_matches_monte_carlo(scale):
    sigma = 0.01
    mc = mc_oracle_lbp_cov(sigma, scale, n=10**6, seed=3)
    an = lbp_covariance(sigma, scale.points)
    assert np.max(np.abs(mc - an) / an) < 0.03


@pytest.mark.parametrize("p", [8, 16, 24])
def test_sherman_morrison_equals_dense_inverse(p):
    rng = np.random.default_rng(p)
    z = rng.standard_normal((50, p)) * 0.03
    inv = np.linalg.inv(lbp_covariance(0.02, p))
    ref = np.einsum("ni,ij,nj->n", z, inv, z)
    np.testing.assert_allclose(lbp_mahalanobis(z, 0.02), ref, rtol=1e-9)
    assert lbp_mahalanobis(np.zeros(p), 0.02) == 0


def test_sigma_floor_keeps_distance_finite():
    out = lbp_multiscale(np.full((12, 12), 0.5), [S18], sigma_i=0.0)
    assert out.sigma_floored
    assert np.isfinite(out.d2).all() and not out.d2.any()


def test_homogeneous_distance_is_chi2():
    rng = np.random.default_rng(11)
    sigma = 0.01
    samples = []
    for _ in range(8):
        a = 0.5 + sigma * rng.standard_normal((390, 390))
        z, valid = lbp_differences(a, S18)
        d2 = lbp_mahalanobis(z, sigma, axis=0)
        # stride 3 keeps the windows disjoint, so samples are independent
        samples.append(d2[1:-1:3, 1:-1:3].ravel())
    d2 = np.concatenate(samples)[:10**5]
    assert d2.size == 10**5
    assert d2.mean() == pytest.approx(8, rel=0.05)
    assert stats.kstest(d2, stats.chi2(8).cdf).pvalue > 0.01


def test_multiscale_shapes_and_composition():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(48, 48))
    out = lbp_multiscale(a, DEFAULT_SCALES, sigma_i=0.01)
    assert out.codes.shape == (3, 48, 48) and out.d2.shape == (3, 48, 48)
    assert out.to_float_map().channels == 6
    assert out.ks == (8, 16, 24)
    single = lbp_multiscale(a, [S18], 0.01)
    np.testing.assert_array_equal(single.codes[0] * 255, lbp_codes(a, S18))
    for s, c in zip(DEFAULT_SCALES, out.codes):
        scaled = c * ((1 << s.points) - 1)
        assert np.abs(scaled - np.round(scaled)).max() < 1e-6
        assert c.min() >= 0 and c.max() <= 1
    assert (out.d2 >= 0).all()
    assert not out.valid[2, 2].any() and out.valid[2, 3:-3, 3:-3].all()


def test_multiscale_size_error():
    with pytest.raises(ShapeError):
        lbp_multiscale(np.zeros((7, 40)), DEFAULT_SCALES, 0.01)


def test_constant_image_d2_zero():
    out = lbp_multiscale(np.full((16, 16), 0.7), DEFAULT_SCALES, 0.01)
    assert not out.d2.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.3, 3.0), st.integers(0, 2**16))
def test_monotone_remap_invariance(gamma, seed):
    a = np.random.default_rng(seed).uniform(0.01, 1, (12, 12))
    for s in DEFAULT_SCALES[:2]:
        np.testing.assert_array_equal(lbp_codes(a, s), lbp_codes(a**gamma, s))


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.5, 0.5), st.integers(0, 2**16))
def test_d2_offset_invariance(c, seed):
    a = np.random.default_rng(seed).uniform(0, 1, (12, 12))
    base = lbp_multiscale(a, [S18], 0.05).d2
    np.testing.assert_allclose(lbp_multiscale(a + c, [S18], 0.05).d2, base, rtol=1e-9, atol=1e-9)
