"""Normalized rg chromaticity, its noise covariance, and the gray-point test."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import NoiseModel
from .raster import FloatMap, ImageRGB

S_FLOOR = 3.0 / 255.0
EPS_REG = 1e-12
GRAY = 1.0 / 3.0
K_RG = 2


@dataclass(frozen=True)
class RgOutput:
    rg: FloatMap
    d2: FloatMap
    valid: np.ndarray
    k: int = K_RG


def _rg64(rgb: np.ndarray):
    s = rgb.sum(axis=-1)
    ok = s >= S_FLOOR
    safe = np.where(ok, s, 1.0)
    r = np.where(ok, rgb[..., 0] / safe, GRAY)
    g = np.where(ok, rgb[..., 1] / safe, GRAY)
    return r, g, s, ok


def rg_transform(img: ImageRGB) -> FloatMap:
    """r = R/S, g = G/S; pixels darker than ``S_FLOOR`` map to (1/3, 1/3)."""
    r, g, _, _ = _rg64(img.as_float64())
    return FloatMap(np.stack([r, g]))


def rg_covariance(R, G, B, noise: NoiseModel) -> np.ndarray:
    """First-order covariance of (r, g) under independent channel noise.

    Uses sigma_I^2 = (sigma_R^2 + sigma_G^2 + sigma_B^2) / 3 and is written
    with the sigma_I^2 prefactor multiplied through, so sigma = 0 needs no
    special case.  Returns shape (..., 2, 2).
    """
    R, G, B = (np.asarray(x, dtype=np.float64) for x in (R, G, B))
    S = R + G + B
    vr, vg, _ = (s * s for s in noise.channels)
    vi = noise.sigma_sum_var / 3.0
    inv_s2 = 1.0 / (S * S)
    c11 = inv_s2 * (vr * (1.0 - 2.0 * R / S) + 3.0 * vi * R * R / (S * S))
    c22 = inv_s2 * (vg * (1.0 - 2.0 * G / S) + 3.0 * vi * G * G / (S * S))
    c12 = inv_s2 * (-(vg * R + vr * G) / S + 3.0 * vi * R * G / (S * S))
    return np.stack([np.stack([c11, c12], -1), np.stack([c12, c22], -1)], -2)


def rg_h0_covariance(S, noise: NoiseModel) -> np.ndarray:
    """Covariance at the gray point R = G = B = S/3, keeping the observed S."""
    S = np.asarray(S, dtype=np.float64)
    return rg_covariance(S / 3.0, S / 3.0, S / 3.0, noise)


def mahalanobis2(dr, dg, cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance through the closed 2x2 inverse; returns (d2, ok)."""
    a = cov[..., 0, 0] + EPS_REG
    d = cov[..., 1, 1] + EPS_REG
    b = cov[..., 0, 1]
    det = a * d - b * b
    ok = det > 0
    det = np.where(ok, det, 1.0)
    d2 = (d * dr * dr - 2.0 * b * dr * dg + a * dg * dg) / det
    return np.where(ok, np.maximum(d2, 0.0), 0.0), ok


def rg_mahalanobis(img: ImageRGB, noise: NoiseModel) -> RgOutput:
    r, g, s, ok = _rg64(img.as_float64())
    cov = rg_h0_covariance(np.where(ok, s, 1.0), noise)
    d2, inv_ok = mahalanobis2(r - GRAY, g - GRAY, cov)
    valid = ok & inv_ok
    d2 = np.where(valid, d2, 0.0)
    return RgOutput(FloatMap(np.stack([r, g])), FloatMap(d2[None]), valid)
