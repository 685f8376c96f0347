import math

import numpy as np
import pytest
from scipy import ndimage

from conftest import flat_image
from quasiconf.errors import ConfigError, EstimationError
from quasiconf.noise import (
    NoiseEstimationParams, NoiseModel, canny_edges, estimate_channel_sigma, estimate_noise_model,
    sobel_magnitude, structure_mask,
)
from quasiconf.raster import ImageRGB


def halves(size=256, sigma=0.05, seed=0, lo=0.3, hi=0.7):
    rng = np.random.default_rng(seed)
    a = np.full((size, size, 3), lo)
    a[:, size // 2:] = hi
    return ImageRGB(a + sigma * rng.standard_normal(a.shape))


def test_noise_model_validation_and_kv_round_trip():
    with pytest.raises(ValueError):
        NoiseModel(-0.1, 0, 0, 0)
    with pytest.raises(ValueError):
        NoiseModel(float("nan"), 0, 0, 0)
    m = NoiseModel(0.01, 0.02, 0.03, 0.004)
    assert NoiseModel.from_kv(m.to_kv()) == m
    with pytest.raises(ConfigError):
        NoiseModel.from_kv("sigma_r=1\n")


@pytest.mark.parametrize("kw", [dict(structure_fraction=0), dict(structure_fraction=1.5),
                                dict(extreme_discard=0.5), dict(canny_low=0.8, canny_high=0.7),
                                dict(edge_exclusion_radius=-1)])
def test_params_validation(kw):
    with pytest.raises(ConfigError):
        NoiseEstimationParams(**kw)


def test_constant_image_mask_takes_fraction_in_scan_order():
    a = np.full((20, 30), 0.4)
    mask = structure_mask(a)
    n_interior = 18 * 28
    assert mask.sum() == round(0.1 * n_interior)
    # zero gradients everywhere: ties go to the first interior pixels in row-major order
    flat = np.flatnonzero(mask.ravel())
    interior = np.zeros((20, 30), bool)
    interior[1:-1, 1:-1] = True
    expected = np.flatnonzero(interior.ravel())[:mask.sum()]
    assert np.array_equal(flat, expected)
    assert not mask[0].any() and not mask[-1].any() and not mask[:, 0].any() and not mask[:, -1].any()


def test_two_halves_mask_keeps_clear_of_edge():
    img = halves()
    inten = img.as_float64().mean(axis=2)
    mask = structure_mask(inten)
    cols = np.nonzero(mask)[1]
    # the step lies between columns 127 and 128
    assert np.min(np.abs(cols - 127.5)) > 5


def test_mask_equals_brute_force_sort():
    rng = np.random.default_rng(5)
    field = ndimage.gaussian_filter(rng.standard_normal((40, 50)), 3) * 4 + 0.5
    field += 0.01 * rng.standard_normal(field.shape)
    params = NoiseEstimationParams()
    mask = structure_mask(field, params)

    # independent candidate set: interior, away from edges, inside intensity tails
    h, w = field.shape
    cand = np.zeros((h, w), bool)
    cand[1:-1, 1:-1] = True
    edges = canny_edges(field, params.canny_low, params.canny_high)
    cand &= ndimage.distance_transform_edt(~edges) > params.edge_exclusion_radius
    box = ndimage.uniform_filter(field, 3)
    inner = np.zeros((h, w), bool)
    inner[1:-1, 1:-1] = True
    lo, hi = np.quantile(box[inner], [0.05, 0.95])
    cand &= (box >= lo - 1e-12) & (box <= hi + 1e-12)

    grad = np.zeros((h, w))
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            p = field[y - 1:y + 2, x - 1:x + 2]
            gx = (p[:, 2] - p[:, 0]) @ [1, 2, 1]
            gy = (p[2] - p[0]) @ [1, 2, 1]
            grad[y, x] = math.hypot(gx, gy)
    n = min(int(cand.sum()), round(0.1 * (h - 2) * (w - 2)))
    ranked = sorted(((grad[y, x], y, x) for y, x in zip(*np.nonzero(cand))))
    ref = np.zeros((h, w), bool)
    for _, y, x in ranked[:n]:
        ref[y, x] = True
    assert np.array_equal(mask, ref)
    np.testing.assert_allclose(sobel_magnitude(field), grad, atol=1e-12)


def test_tiny_image_rejected():
    with pytest.raises(EstimationError):
        structure_mask(np.zeros((7, 20)))


def test_empty_mask_raises():
    with pytest.raises(EstimationError):
        estimate_channel_sigma(np.zeros((10, 10)), np.zeros((10, 10), bool))


def test_mask_empty_after_exclusions_raises():
    # one edge with an exclusion radius wider than the image leaves nothing
    a = np.zeros((32, 32))
    a[:, 16:] = 1.0
    with pytest.raises(EstimationError):
        structure_mask(a, NoiseEstimationParams(edge_exclusion_radius=100))


def test_constant_image_sigma_zero():
    assert estimate_noise_model(ImageRGB(np.full((16, 16, 3), 0.3))) == NoiseModel(0, 0, 0, 0)


@pytest.mark.parametrize("sigma", [0.01, 0.05, 0.1])
def test_flat_image_estimate_within_10_percent(sigma):
    rng = np.random.default_rng(1)
    a = 0.5 + sigma * rng.standard_normal((256, 256))
    mask = structure_mask(a)
    assert abs(estimate_channel_sigma(a, mask) / sigma - 1) < 0.10


def test_offset_invariance(rng):
    a = 0.4 + 0.03 * rng.standard_normal((64, 64))
    mask = structure_mask(a)
    assert estimate_channel_sigma(a + 0.25, mask) == pytest.approx(estimate_channel_sigma(a, mask), rel=1e-9)


def test_per_channel_noise_recovered():
    nm = estimate_noise_model(flat_image(256, (0.02, 0.05, 0.08), seed=3))
    for est, true in zip(nm.channels, (0.02, 0.05, 0.08)):
        assert abs(est / true - 1) < 0.15


def test_sigma_i_is_sigma_over_root3():
    sigma = 0.05
    nm = estimate_noise_model(flat_image(256, sigma, seed=4))
    assert nm.sigma_i == pytest.approx(sigma / math.sqrt(3), rel=0.1)
    # Monte-Carlo check of the relationship for independent channels
    draws = np.random.default_rng(0).standard_normal((200_000, 3)) * sigma
    assert draws.mean(axis=1).std() == pytest.approx(sigma / math.sqrt(3), rel=0.01)
    assert nm.sigma_i ** 2 == pytest.approx(nm.sigma_sum_var / 9, rel=0.1)


def test_relative_error_shrinks_with_area():
    errs = []
    for size in (64, 128, 256):
        e = [estimate_noise_model(flat_image(size, 0.03, seed=s)).sigma_r / 0.03 - 1 for s in range(30)]
        errs.append(np.sqrt(np.mean(np.square(e))))
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("c", [0.5, 0.25])
def test_scale_equivariance(c):
    img = flat_image(96, 0.03, seed=8, level=0.6)
    base = estimate_noise_model(img)
    scaled = estimate_noise_model(ImageRGB(img.data * c))
    for a, b in zip(base.as_dict().values(), scaled.as_dict().values()):
        assert b == pytest.approx(c * a, rel=1e-6)


def test_scale_equivariance_float64_plane():
    rng = np.random.default_rng(2)
    a = 0.6 + 0.03 * rng.standard_normal((96, 96))
    c = 0.37
    s0 = estimate_channel_sigma(a, structure_mask(a))
    s1 = estimate_channel_sigma(c * a, structure_mask(c * a))
    assert s1 == pytest.approx(c * s0, rel=1e-6)


def test_edge_does_not_inflate_estimate():
    flat = estimate_noise_model(flat_image(256, 0.05, seed=0)).sigma_r
    edged = estimate_noise_model(halves(sigma=0.05, seed=0)).sigma_r
    assert edged / flat - 1 < 0.05
