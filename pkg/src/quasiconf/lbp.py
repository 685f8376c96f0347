"""Multi-scale local binary patterns with a homogeneity test per pixel.

Neighbours are taken on a circle of the given radius.  The default
``lattice`` sampling assigns every circle point to a distinct raster pixel
(optimal assignment by squared distance), so neighbour noise terms stay
independent and the covariance below is exact.  ``bilinear`` sampling is the
classical alternative; its interpolated samples mix raster pixels and break
that independence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, ShapeError
from .raster import FloatMap, IntensityMap

SIGMA_FLOOR = 1e-6
SAMPLING_MODES = ("lattice", "bilinear")


@dataclass(frozen=True)
class LbpScale:
    radius: int
    points: int

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError("LBP radius must be >= 1")
        if self.points < 4:
            raise ConfigError("LBP needs at least 4 points")
        if self.points > 8 * self.radius:
            raise ConfigError(f"at most {8 * self.radius} points fit radius {self.radius}")

    @classmethod
    def parse(cls, text: str) -> "LbpScale":
        r, _, p = text.partition(":")
        try:
            return cls(int(r), int(p))
        except ValueError:
            raise ConfigError(f"bad LBP scale {text!r}; expected radius:points") from None

    def __str__(self) -> str:
        return f"{self.radius}:{self.points}"


DEFAULT_SCALES = (LbpScale(1, 8), LbpScale(2, 16), LbpScale(3, 24))


def parse_scales(text: str) -> tuple[LbpScale, ...]:
    return tuple(LbpScale.parse(t) for t in text.split(",") if t.strip())


@lru_cache(maxsize=None)
def neighbor_offsets(radius: int, points: int, sampling: str = "lattice") -> np.ndarray:
    """(points, 2) array of (dx, dy) offsets, counter-clockwise from angle 0.

    Image rows grow downwards, so counter-clockwise means dy = -r sin(angle).
    """
    if sampling not in SAMPLING_MODES:
        raise ConfigError(f"unknown sampling {sampling!r}")
    angles = 2.0 * np.pi * np.arange(points) / points
    target = np.stack([radius * np.cos(angles), -radius * np.sin(angles)], axis=1)
    if sampling == "bilinear":
        off = np.round(target, 9)
        off[off == 0] = 0.0
        off.setflags(write=False)
        return off
    grid = np.arange(-radius, radius + 1)
    cand = np.array([(x, y) for y in grid for x in grid if (x, y) != (0, 0)], dtype=np.float64)
    cost = ((target[:, None, :] - cand[None, :, :]) ** 2).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    off = cand[cols[np.argsort(rows)]]
    off.setflags(write=False)
    return off


def _as_plane(intensity) -> np.ndarray:
    a = intensity.data if isinstance(intensity, IntensityMap) else intensity
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a single intensity plane, got shape {a.shape}")
    return a


def _shift(a: np.ndarray, r: int, dx: int, dy: int) -> np.ndarray:
    h, w = a.shape
    return a[r + dy:h - r + dy, r + dx:w - r + dx]


def _sample(a: np.ndarray, r: int, fx: float, fy: float) -> np.ndarray:
    x0, y0 = math.floor(fx), math.floor(fy)
    tx, ty = fx - x0, fy - y0
    if tx == 0 and ty == 0:
        return _shift(a, r, x0, y0)
    out = (1 - tx) * (1 - ty) * _shift(a, r, x0, y0)
    if tx:
        out = out + tx * (1 - ty) * _shift(a, r, x0 + 1, y0)
    if ty:
        out = out + (1 - tx) * ty * _shift(a, r, x0, y0 + 1)
    if tx and ty:
        out = out + tx * ty * _shift(a, r, x0 + 1, y0 + 1)
    return out


def lbp_differences(intensity, scale: LbpScale, sampling: str = "lattice"):
    """Neighbour differences z_i = I_{n_i} - I for every pixel.

    Returns ``(z, valid)`` with z of shape (points, H, W); the border of
    width ``radius`` is invalid and holds zeros.
    """
    a = _as_plane(intensity)
    h, w = a.shape
    r = scale.radius
    if h < 2 * r + 1 or w < 2 * r + 1:
        raise ShapeError(f"image {w}x{h} too small for LBP radius {r}")
    centre = a[r:h - r, r:w - r]
    z = np.zeros((scale.points, h, w))
    for i, (fx, fy) in enumerate(neighbor_offsets(scale.radius, scale.points, sampling)):
        z[i, r:h - r, r:w - r] = _sample(a, r, fx, fy) - centre
    valid = np.zeros((h, w), dtype=bool)
    valid[r:h - r, r:w - r] = True
    return z, valid


def lbp_neighbors(intensity, pixel: tuple[int, int], scale: LbpScale,
                  sampling: str = "lattice") -> np.ndarray:
    """Difference vector at ``pixel`` = (row, col)."""
    a = _as_plane(intensity)
    y, x = pixel
    r = scale.radius
    if not (r <= y < a.shape[0] - r and r <= x < a.shape[1] - r):
        raise ShapeError(f"pixel {pixel} lies inside the radius-{r} border")
    window = a[y - r:y + r + 1, x - r:x + r + 1]
    z, _ = lbp_differences(window, scale, sampling)
    return z[:, r, r]


def codes_from_differences(z: np.ndarray, axis: int = 0) -> np.ndarray:
    """Bit i is set iff z_i >= 0; bit 0 is the angle-0 neighbour."""
    bits = np.moveaxis(np.asarray(z) >= 0, axis, 0)
    weights = (1 << np.arange(bits.shape[0], dtype=np.int64)).reshape((-1,) + (1,) * (bits.ndim - 1))
    return (bits * weights).sum(axis=0)


def lbp_codes(intensity, scale: LbpScale, sampling: str = "lattice") -> np.ndarray:
    """Integer LBP codes (int64); border pixels are 0."""
    z, valid = lbp_differences(intensity, scale, sampling)
    return np.where(valid, codes_from_differences(z), 0)


def lbp_covariance(sigma_i: float, p: int) -> np.ndarray:
    """sigma^2 (I + J): 2 sigma^2 on the diagonal, sigma^2 elsewhere."""
    v = float(sigma_i) ** 2
    return v * (np.eye(p) + np.ones((p, p)))


def lbp_mahalanobis(z, sigma_i: float, axis: int = -1) -> np.ndarray:
    """z^T (sigma^2 (I + J))^{-1} z via Sherman-Morrison."""
    z = np.asarray(z, dtype=np.float64)
    p = z.shape[axis]
    s2 = max(float(sigma_i), SIGMA_FLOOR) ** 2
    sq = (z * z).sum(axis=axis)
    tot = z.sum(axis=axis)
    return np.maximum(sq - tot * tot / (p + 1), 0.0) / s2


@dataclass(frozen=True)
class LbpOutput:
    """Per-scale code and distance planes.

    ``codes`` is float64 so that code * (2**p - 1) stays an exact integer for
    p up to 40; ``to_float_map`` drops to 32 bits for interchange.
    """

    codes: np.ndarray   # (n_scales, H, W), scaled to [0, 1]
    d2: np.ndarray      # (n_scales, H, W)
    valid: np.ndarray   # (n_scales, H, W) bool
    scales: tuple[LbpScale, ...]
    sigma_floored: bool = False

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(s.points for s in self.scales)

    def to_float_map(self) -> FloatMap:
        return FloatMap(np.concatenate([self.codes, self.d2]))


def lbp_multiscale(intensity, scales=DEFAULT_SCALES, sigma_i: float = 0.0,
                   sampling: str = "lattice") -> LbpOutput:
    a = _as_plane(intensity)
    scales = tuple(scales)
    if not scales:
        raise ConfigError("need at least one LBP scale")
    rmax = max(s.radius for s in scales)
    h, w = a.shape
    if h < 2 * rmax + 2 or w < 2 * rmax + 2:
        raise ShapeError(f"image {w}x{h} too small for LBP radius {rmax}")
    codes, d2s, valids = [], [], []
    for s in scales:
        z, valid = lbp_differences(a, s, sampling)
        c = np.where(valid, codes_from_differences(z), 0)
        codes.append(c.astype(np.float64) / float((1 << s.points) - 1))
        d2s.append(np.where(valid, lbp_mahalanobis(z, sigma_i, axis=0), 0.0))
        valids.append(valid)
    return LbpOutput(np.stack(codes), np.stack(d2s), np.stack(valids), scales,
                     sigma_floored=float(sigma_i) < SIGMA_FLOOR)
