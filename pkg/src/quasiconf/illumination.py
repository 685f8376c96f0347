"""Gray-point illuminant estimate and von Kries diagonal correction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIlluminantError, GrayPointError
from .noise import NoiseModel
from .raster import ImageRGB

DEFAULT_DELTA = 0.05
DARK_SUM_FLOOR = 0.05
GAIN_EPS = 1e-6


@dataclass(frozen=True)
class GrayPointEstimate:
    r_bar: float
    g_bar: float
    support_count: int

    def __post_init__(self):
        if self.support_count < 1:
            raise GrayPointError("gray point needs at least one supporting pixel")
        if not (self.r_bar + self.g_bar < 1):
            raise GrayPointError("gray point chromaticities must sum below 1")

    @property
    def gains(self) -> tuple[float, float, float]:
        b_bar = 1.0 - self.r_bar - self.g_bar
        for v in (self.r_bar, self.g_bar, b_bar):
            if v <= GAIN_EPS:
                raise DegenerateIlluminantError(
                    f"degenerate illuminant chromaticity ({self.r_bar}, {self.g_bar})")
        third = 1.0 / 3.0
        return (third / self.r_bar, third / self.g_bar, third / b_bar)


IDENTITY_GRAY_POINT = GrayPointEstimate(1.0 / 3.0, 1.0 / 3.0, 1)


def estimate_gray_point(img: ImageRGB, delta: float = DEFAULT_DELTA,
                        s_min: float = DARK_SUM_FLOOR) -> GrayPointEstimate:
    if not 0 < delta < 1.0 / 3.0:
        raise ValueError("delta must lie in (0, 1/3)")
    rgb = img.as_float64()
    s = rgb.sum(axis=2)
    ok = s >= s_min
    safe = np.where(ok, s, 1.0)
    r = rgb[:, :, 0] / safe
    g = rgb[:, :, 1] / safe
    third = 1.0 / 3.0
    sel = ok & (np.abs(r - third) <= delta) & (np.abs(g - third) <= delta)
    n = int(sel.sum())
    if n == 0:
        raise GrayPointError(f"no near-gray pixels within delta={delta}")
    return GrayPointEstimate(float(r[sel].mean()), float(g[sel].mean()), n)


@dataclass(frozen=True)
class CorrectionResult:
    image: ImageRGB
    noise: NoiseModel
    gains: tuple[float, float, float]
    clipped: int


def correct_illumination(img: ImageRGB, gp: GrayPointEstimate, noise: NoiseModel) -> CorrectionResult:
    """Scale R, G, B by the gray-point gains.

    Channel noise scales by the same gains. ``sigma_i`` is left as is: the
    texture stream reads the uncorrected intensity.
    """
    gains = gp.gains
    if all(abs(k - 1.0) < 1e-12 for k in gains):
        return CorrectionResult(img, noise, (1.0, 1.0, 1.0), 0)
    scaled = img.as_float64() * np.asarray(gains)
    clipped = int(np.any((scaled < 0) | (scaled > 1), axis=2).sum())
    return CorrectionResult(ImageRGB(np.clip(scaled, 0.0, 1.0)), noise.scaled(gains), gains, clipped)
