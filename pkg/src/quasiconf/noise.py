"""Single-image Gaussian noise estimation.

Immerkær's Laplacian estimator, evaluated only over the least-structured
pixels of the image.  Structure is ranked by Sobel gradient magnitude; pixels
near Canny edges and pixels in the intensity/saturation tails are dropped
before ranking.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, EstimationError
from .raster import ImageRGB, intensity

MIN_SIDE = 8

LAPLACIAN = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])


@dataclass(frozen=True)
class NoiseModel:
    sigma_r: float
    sigma_g: float
    sigma_b: float
    sigma_i: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def channels(self) -> tuple[float, float, float]:
        return (self.sigma_r, self.sigma_g, self.sigma_b)

    @property
    def sigma_sum_var(self) -> float:
        """Variance of R+G+B for independent channel noise."""
        return self.sigma_r**2 + self.sigma_g**2 + self.sigma_b**2

    @classmethod
    def isotropic(cls, sigma: float, sigma_i: float | None = None) -> "NoiseModel":
        if sigma_i is None:
            sigma_i = sigma / math.sqrt(3.0)
        return cls(sigma, sigma, sigma, sigma_i)

    def scaled(self, gains) -> "NoiseModel":
        kr, kg, kb = (float(g) for g in gains)
        return replace(self, sigma_r=self.sigma_r * kr, sigma_g=self.sigma_g * kg,
                       sigma_b=self.sigma_b * kb)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_kv(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, text: str) -> "NoiseModel":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = float(value)
        try:
            return cls(vals["sigma_r"], vals["sigma_g"], vals["sigma_b"], vals["sigma_i"])
        except KeyError as e:
            raise ConfigError(f"noise model file lacks {e.args[0]}") from None


@dataclass(frozen=True)
class NoiseEstimationParams:
    structure_fraction: float = 0.10
    extreme_discard: float = 0.05
    canny_low: float = 0.55
    canny_high: float = 0.75
    edge_exclusion_radius: int = 5

    def __post_init__(self):
        if not 0 < self.structure_fraction <= 1:
            raise ConfigError("structure_fraction must lie in (0, 1]")
        if not 0 <= self.extreme_discard < 0.5:
            raise ConfigError("extreme_discard must lie in [0, 0.5)")
        if not 0 <= self.canny_low < self.canny_high <= 1:
            raise ConfigError("need 0 <= canny_low < canny_high <= 1")
        if self.edge_exclusion_radius < 0:
            raise ConfigError("edge_exclusion_radius must be >= 0")


def _check_plane(channel) -> np.ndarray:
    a = np.asarray(channel, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise EstimationError(f"expected a single plane, got shape {a.shape}")
    if min(a.shape) < MIN_SIDE:
        raise EstimationError(f"image {a.shape[1]}x{a.shape[0]} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    return a


def _interior(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation evaluated on the interior only, zero on the border."""
    h, w = a.shape
    out = np.zeros_like(a)
    acc = out[1:-1, 1:-1]
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy, dx]
            if k:
                acc += k * a[dy:dy + h - 2, dx:dx + w - 2]
    return out


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_BOX = np.full((3, 3), 1.0 / 9.0)


def sobel_magnitude(channel) -> np.ndarray:
    a = _check_plane(channel)
    gx = _interior(a, _SOBEL_X)
    gy = _interior(a, _SOBEL_X.T)
    return np.hypot(gx, gy)


def laplacian_residual(channel) -> np.ndarray:
    return _interior(_check_plane(channel), LAPLACIAN)


def canny_edges(channel, low: float, high: float, smoothing: float = 1.0) -> np.ndarray:
    """Canny edge map with hysteresis thresholds given as fractions of the
    maximum smoothed gradient magnitude."""
    a = _check_plane(channel)
    if smoothing > 0:
        a = ndimage.gaussian_filter(a, smoothing, mode="nearest")
    gx = ndimage.sobel(a, axis=1, mode="nearest")
    gy = ndimage.sobel(a, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    top = mag.max()
    if top <= 0:
        return np.zeros(a.shape, dtype=bool)

    # non-maximum suppression along the quantised gradient direction
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag >= bwd)
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low * top
    strong = nms >= high * top
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(a.shape, dtype=bool)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels]


def _saturation(rgb: np.ndarray) -> np.ndarray:
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    return np.divide(mx - mn, mx, out=np.zeros_like(mx), where=mx > 0)


def _tail_keep(values: np.ndarray, interior: np.ndarray, frac: float) -> np.ndarray:
    if frac <= 0:
        return np.ones(values.shape, dtype=bool)
    lo, hi = np.quantile(values[interior], [frac, 1.0 - frac])
    return (values >= lo) & (values <= hi)


def structure_mask(channel, params: NoiseEstimationParams | None = None, rgb=None) -> np.ndarray:
    """Boolean mask of the least-structured interior pixels.

    Intensity and saturation tails are evaluated on 3x3 local means: the box
    filter is orthogonal to both Sobel and Laplacian kernels, so under i.i.d.
    Gaussian noise the discard step is independent of the residuals it feeds.
    """
    params = params or NoiseEstimationParams()
    a = _check_plane(channel)
    h, w = a.shape
    interior = np.zeros((h, w), dtype=bool)
    interior[1:-1, 1:-1] = True

    candidates = interior.copy()
    edges = canny_edges(a, params.canny_low, params.canny_high)
    if edges.any():
        near = ndimage.distance_transform_edt(~edges) <= params.edge_exclusion_radius
        candidates &= ~near

    local_i = _interior(a, _BOX)
    candidates &= _tail_keep(local_i, interior, params.extreme_discard)
    if rgb is not None:
        rgb = np.asarray(rgb, dtype=np.float64)
        local_rgb = np.stack([_interior(rgb[:, :, c], _BOX) for c in range(3)], axis=2)
        candidates &= _tail_keep(_saturation(local_rgb), interior, params.extreme_discard)

    n_cand = int(candidates.sum())
    if n_cand == 0:
        raise EstimationError(
            "no low-structure pixels left after exclusions; use a larger image "
            "or loosen edge_exclusion_radius / extreme_discard")
    n_select = min(n_cand, max(1, int(round(params.structure_fraction * interior.sum()))))

    grad = sobel_magnitude(a).ravel()
    idx = np.flatnonzero(candidates.ravel())
    # stable sort keeps row-major order among equal magnitudes
    order = np.argsort(grad[idx], kind="stable")
    mask = np.zeros(h * w, dtype=bool)
    mask[idx[order[:n_select]]] = True
    return mask.reshape(h, w)


def estimate_channel_sigma(channel, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EstimationError("empty estimation mask")
    res = np.abs(laplacian_residual(channel))[mask]
    return float(math.sqrt(math.pi / 2.0) * res.sum() / (6.0 * n))


def estimate_noise_model(img: ImageRGB, params: NoiseEstimationParams | None = None) -> NoiseModel:
    rgb = img.as_float64()
    inten = intensity(img).data.astype(np.float64)
    mask = structure_mask(inten, params, rgb=rgb)
    sr, sg, sb = (estimate_channel_sigma(rgb[:, :, c], mask) for c in range(3))
    return NoiseModel(sr, sg, sb, estimate_channel_sigma(inten, mask))
