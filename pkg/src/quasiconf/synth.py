"""Synthetic sign-like scenes with exact null-hypothesis masks, Monte-Carlo
oracles for the analytic formulas, and calibration metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import SpecError
from .lbp import LbpScale, lbp_differences
from .noise import NoiseModel
from .raster import ImageRGB

SHAPES = ("none", "circle", "triangle-up", "triangle-down", "square")
GLYPHS = ("none", "bar", "vbar", "stripe", "arrow", "exclaim", "digits")


@dataclass(frozen=True)
class SceneSpec:
    size: int = 48
    shape: str = "circle"
    center: tuple[float, float] | None = None   # (x, y) in pixels
    radius: float = 18.0
    border_width: float = 0.0
    fill: tuple[float, float, float] = (0.8, 0.1, 0.1)
    border: tuple[float, float, float] = (0.8, 0.1, 0.1)
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pictogram: str = "none"
    pictogram_color: tuple[float, float, float] = (0.1, 0.1, 0.1)
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sigma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    label: int = -1

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SpecError(f"unknown shape {self.shape!r}")
        if self.pictogram not in GLYPHS:
            raise SpecError(f"unknown pictogram {self.pictogram!r}")
        for name in ("fill", "border", "background", "pictogram_color"):
            if not all(0.0 <= c <= 1.0 for c in getattr(self, name)):
                raise SpecError(f"{name} must lie in [0, 1]")
        if any(s < 0 for s in self.sigma):
            raise SpecError("noise sigma must be >= 0")
        if self.size < 8:
            raise SpecError("canvas must be at least 8x8")
        if self.shape != "none":
            cx, cy = self.centre
            if (cx - self.radius < -0.5 or cy - self.radius < -0.5
                    or cx + self.radius > self.size - 0.5 or cy + self.radius > self.size - 0.5):
                raise SpecError("shape does not fit on the canvas")

    @property
    def centre(self) -> tuple[float, float]:
        if self.center is None:
            c = (self.size - 1) / 2.0
            return (c, c)
        return self.center


@dataclass(frozen=True)
class GroundTruth:
    h0_rg: np.ndarray    # True where the clean pixel is gray
    h0_lbp: np.ndarray   # True where the clean pixel has no 8-neighbour difference
    label: int = -1

    @property
    def boundary(self) -> np.ndarray:
        return ~self.h0_lbp


def _shape_mask(shape: str, xx, yy, cx, cy, rad) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "none" or rad <= 0:
        return np.zeros(xx.shape, dtype=bool)
    if shape == "circle":
        return dx * dx + dy * dy <= rad * rad
    if shape == "square":
        h = rad / math.sqrt(2.0)
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    # equilateral triangle with circumradius rad
    if shape == "triangle-down":
        dy = -dy
    inr = rad / 2.0
    half = rad * math.sqrt(3.0) / 2.0
    # apex up: top vertex at -rad, base at +inr
    inside = dy <= inr
    inside &= math.sqrt(3.0) * dx - dy <= rad
    inside &= -math.sqrt(3.0) * dx - dy <= rad
    return inside & (np.abs(dx) <= half + 1e-9)


def _glyph_mask(glyph: str, xx, yy, cx, cy, rad) -> np.ndarray:
    dx, dy = (xx - cx) / rad, (yy - cy) / rad
    if glyph == "none":
        return np.zeros(xx.shape, dtype=bool)
    if glyph == "bar":
        return (np.abs(dx) <= 0.6) & (np.abs(dy) <= 0.15)
    if glyph == "vbar":
        return (np.abs(dx) <= 0.12) & (np.abs(dy) <= 0.45)
    if glyph == "stripe":
        return np.abs(dx + dy) <= 0.25
    if glyph == "arrow":
        shaft = (np.abs(dx) <= 0.12) & (dy >= -0.1) & (dy <= 0.55)
        head = (dy >= -0.55) & (dy < -0.1) & (np.abs(dx) <= (dy + 0.55) * 0.9)
        return shaft | head
    if glyph == "exclaim":
        return ((np.abs(dx) <= 0.1) & (dy >= -0.35) & (dy <= 0.15)) | (
            (np.abs(dx) <= 0.1) & (dy >= 0.25) & (dy <= 0.4))
    if glyph == "digits":
        return ((np.abs(dx + 0.25) <= 0.1) | (np.abs(dx - 0.25) <= 0.1)) & (np.abs(dy) <= 0.35)
    raise SpecError(f"unknown pictogram {glyph!r}")


def render_clean(spec: SceneSpec) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cx, cy = spec.centre
    img = np.empty((n, n, 3))
    img[:] = spec.background
    outer = _shape_mask(spec.shape, xx, yy, cx, cy, spec.radius)
    img[outer] = spec.border
    inner_r = spec.radius - (2.0 if spec.shape.startswith("triangle") else 1.0) * spec.border_width
    inner = _shape_mask(spec.shape, xx, yy, cx, cy, inner_r) & outer
    img[inner] = spec.fill
    if spec.shape != "none":
        glyph = _glyph_mask(spec.pictogram, xx, yy, cx, cy, max(inner_r, 1.0)) & inner
        img[glyph] = spec.pictogram_color
    return img


def ground_truth(clean: np.ndarray, label: int = -1) -> GroundTruth:
    h0_rg = (clean[:, :, 0] == clean[:, :, 1]) & (clean[:, :, 1] == clean[:, :, 2])
    inten = clean.sum(axis=2) / 3.0
    padded = np.pad(inten, 1, mode="edge")
    z, _ = lbp_differences(padded, LbpScale(1, 8))
    h0_lbp = np.all(z[:, 1:-1, 1:-1] == 0, axis=0)
    return GroundTruth(h0_rg, h0_lbp, label)


def render_scene(spec: SceneSpec) -> tuple[ImageRGB, GroundTruth]:
    """Hard-edged render, then illuminant gains, then Gaussian noise."""
    clean = render_clean(spec)
    truth = ground_truth(clean, spec.label)
    rng = np.random.default_rng(spec.seed)
    noisy = clean * np.asarray(spec.gains) + rng.standard_normal(clean.shape) * np.asarray(spec.sigma)
    return ImageRGB(np.clip(noisy, 0.0, 1.0)), truth


# ---------------------------------------------------------------- fixtures

def red_circle_spec(sigma: float = 0.02, size: int = 64, seed: int = 0) -> SceneSpec:
    return SceneSpec(size=size, shape="circle", radius=size * 0.3, fill=(0.8, 0.1, 0.1),
                     border=(0.8, 0.1, 0.1), background=(0.5, 0.5, 0.5),
                     sigma=(sigma,) * 3, seed=seed)


def gray_spec(sigma: float = 0.02, size: int = 64, seed: int = 0, level: float = 0.5) -> SceneSpec:
    return SceneSpec(size=size, shape="none", background=(level,) * 3, sigma=(sigma,) * 3, seed=seed)


# 7 groups: colour x shape, mirroring clustered traffic-sign classes
CLASS_NAMES = (
    "red-ring-circle",
    "red-filled-circle",
    "blue-circle",
    "red-triangle-up",
    "red-triangle-down",
    "gray-circle",
    "yellow-square",
)

_RED = (0.78, 0.08, 0.1)
_WHITE = (0.88, 0.88, 0.88)
_BLUE = (0.1, 0.25, 0.7)
_BLACK = (0.08, 0.08, 0.08)
_YELLOW = (0.9, 0.75, 0.1)


def _jitter(rng, colour, amount=0.04):
    return tuple(float(np.clip(c + rng.uniform(-amount, amount), 0.0, 1.0)) for c in colour)


def class_scene(label: int, rng: np.random.Generator, size: int = 48,
                gain_range: float = 0.1, brightness=(0.45, 1.0),
                sigma_range=(0.005, 0.03), background: str = "colour") -> SceneSpec:
    """Random member of one of the seven synthetic classes.

    Brightness and illuminant colour vary per sample: nuisance factors the
    chromaticity and texture operators are insensitive to.
    """
    name = CLASS_NAMES[label]
    radius = rng.uniform(0.36, 0.45) * size
    slack = max(size / 2.0 - 0.5 - radius, 0.0)
    cx = (size - 1) / 2.0 + rng.uniform(-slack, slack)
    cy = (size - 1) / 2.0 + rng.uniform(-slack, slack)
    if background == "colour":
        bg = tuple(float(v) for v in rng.uniform(0.15, 0.6, 3))
    elif background == "neutral":
        bg = (float(rng.uniform(0.15, 0.6)),) * 3
    else:
        raise SpecError(f"unknown background mode {background!r}")
    white = _WHITE
    kw = dict(shape="circle", border_width=0.0, pictogram="none")
    if name == "red-ring-circle":
        kw.update(border=_jitter(rng, _RED), fill=white, border_width=radius * 0.2,
                  pictogram=("digits", "exclaim", "vbar")[rng.integers(3)], pictogram_color=_BLACK)
    elif name == "red-filled-circle":
        kw.update(border=_jitter(rng, _RED), fill=_jitter(rng, _RED), pictogram="bar",
                  pictogram_color=white)
    elif name == "blue-circle":
        kw.update(border=_jitter(rng, _BLUE), fill=_jitter(rng, _BLUE), pictogram="arrow",
                  pictogram_color=white)
    elif name in ("red-triangle-up", "red-triangle-down"):
        kw.update(shape=name[len("red-"):], border=_jitter(rng, _RED), fill=white,
                  border_width=radius * 0.14,
                  pictogram="exclaim" if name.endswith("up") else "none", pictogram_color=_BLACK)
    elif name == "gray-circle":
        kw.update(border=white, fill=white, pictogram="stripe", pictogram_color=(0.35, 0.35, 0.35))
    elif name == "yellow-square":
        kw.update(shape="square", border=white, fill=_jitter(rng, _YELLOW), border_width=radius * 0.1)
    b = rng.uniform(*brightness)
    gains = tuple(float(b * g) for g in rng.uniform(1.0 - gain_range, 1.0 + gain_range, 3))
    sigma = (float(rng.uniform(*sigma_range)),) * 3
    return SceneSpec(size=size, center=(cx, cy), radius=radius, background=bg, gains=gains,
                     sigma=sigma, seed=int(rng.integers(2**31)), label=label, **kw)


# ---------------------------------------------------------------- oracles

def mc_oracle_rg_cov(R: float, G: float, B: float, noise: NoiseModel, n: int = 10**6,
                     seed: int = 0) -> np.ndarray:
    """Sample covariance of (r, g) over noisy draws of one pixel."""
    if n < 10**5:
        raise ValueError("use at least 1e5 draws")
    rng = np.random.default_rng(seed)
    x = np.array([R, G, B]) + rng.standard_normal((n, 3)) * np.asarray(noise.channels)
    s = x.sum(axis=1)
    rg = np.stack([x[:, 0] / s, x[:, 1] / s])
    return np.cov(rg)


def mc_oracle_mixture(k: int, lam1: float, lam2: float, n: int = 10**6, seed: int = 0,
                      chunk: int = 250_000) -> tuple[float, float]:
    """Sample mean/variance of ||g + sqrt(lambda) e1||^2, lambda ~ U[lam1, lam2]."""
    rng = np.random.default_rng(seed)
    total, parts = 0, []
    while total < n:
        m = min(chunk, n - total)
        lam = rng.uniform(lam1, lam2, m) if lam2 > lam1 else np.full(m, float(lam1))
        g = rng.standard_normal((m, k))
        g[:, 0] += np.sqrt(lam)
        parts.append(np.einsum("ij,ij->i", g, g))
        total += m
    x = np.concatenate(parts)
    return float(x.mean()), float(x.var(ddof=1))


def mc_oracle_lbp_cov(sigma: float, scale: LbpScale, n: int = 10**6, seed: int = 0,
                      sampling: str = "lattice", side: int = 256) -> np.ndarray:
    """Empirical covariance of neighbour differences on noisy constant images."""
    rng = np.random.default_rng(seed)
    parts, total = [], 0
    while total < n:
        a = 0.5 + sigma * rng.standard_normal((side, side))
        z, valid = lbp_differences(a, scale, sampling)
        parts.append(z[:, valid])
        total += parts[-1].shape[1]
    z = np.concatenate(parts, axis=1)[:, :n]
    return np.cov(z)


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class CalibrationReport:
    auc: float | None
    mean_conf_h0: float | None
    mean_conf_not_h0: float | None
    fpr_at_half: float | None
    n_pixels: int = 0
    extra: dict = field(default_factory=dict)


def rank_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Mann-Whitney AUC with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def calibration_report(conf, h0_mask, valid=None, exclude=None) -> CalibrationReport:
    conf = np.asarray(conf, dtype=np.float64)
    h0 = np.asarray(h0_mask, dtype=bool)
    if conf.shape != h0.shape:
        raise SpecError(f"confidence {conf.shape} and truth {h0.shape} are not aligned")
    use = np.ones(conf.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).copy()
    if exclude is not None:
        use &= ~np.asarray(exclude, dtype=bool)
    c, t = conf[use], h0[use]
    return CalibrationReport(
        auc=rank_auc(c, ~t),
        mean_conf_h0=float(c[t].mean()) if t.any() else None,
        mean_conf_not_h0=float(c[~t].mean()) if (~t).any() else None,
        fpr_at_half=float((c[t] > 0.5).mean()) if t.any() else None,
        n_pixels=int(use.sum()),
    )
