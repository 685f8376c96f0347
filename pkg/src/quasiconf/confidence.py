"""Posterior confidence maps from squared Mahalanobis distances.

Both hypotheses model d^2 as a uniform mixture of noncentral chi-squared
laws over a noncentrality range; the mixture is replaced by the Gaussian with
the same first two moments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ScheduleError
from .raster import FloatMap

DENSITY_FLOOR = 1e-300
FIXED_SPLITS = (0.0, 100.0, 1000.0)
SPLIT_MEDIAN_FACTOR = 0.5
TOP_MEDIAN_FACTOR = 1.75

_PRIORS = {
    ("rg", None): 0.472,
    ("lbp", (1, 8)): 0.5445,
    ("lbp", (3, 24)): 0.522,
    ("lbp", (5, 40)): 0.5036,
}
FALLBACK_PRIOR = 0.5


@dataclass(frozen=True)
class HypothesisSpec:
    k: int
    lambda_lo: float
    lambda_hi: float
    prior: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0 <= self.lambda_lo <= self.lambda_hi:
            raise ConfigError(f"need 0 <= lambda_lo <= lambda_hi, got {self.lambda_lo}, {self.lambda_hi}")
        if not 0 <= self.prior <= 1:
            raise ConfigError("prior must lie in [0, 1]")


def mixture_moments(k: float, lam1: float, lam2: float) -> tuple[float, float]:
    """Mean and variance of a chi^2_k(lambda) mixture with lambda ~ U[lam1, lam2].

    Law of total variance: E[2(k + 2 lambda)] + Var[lambda].
    """
    if not 0 <= lam1 <= lam2:
        raise ConfigError("need 0 <= lam1 <= lam2")
    mean = k + 0.5 * (lam1 + lam2)
    var = 2.0 * k + 2.0 * (lam1 + lam2) + (lam2 - lam1) ** 2 / 12.0
    return mean, var


def log_likelihood(d2, spec: HypothesisSpec) -> np.ndarray:
    mu, var = mixture_moments(spec.k, spec.lambda_lo, spec.lambda_hi)
    d2 = np.asarray(d2, dtype=np.float64)
    return -0.5 * (d2 - mu) ** 2 / var - 0.5 * math.log(2.0 * math.pi * var)


def likelihood(d2, spec: HypothesisSpec) -> np.ndarray:
    """Gaussian-approximated mixture density, floored at ``DENSITY_FLOOR``."""
    return np.maximum(np.exp(log_likelihood(d2, spec)), DENSITY_FLOOR)


def posterior_confidence(d2, h0: HypothesisSpec, h1: HypothesisSpec) -> np.ndarray:
    """P(not H0 | d2); the prior of not-H0 is 1 - h0.prior.

    Evaluated as a logistic of the log-odds so that far tails, where both
    densities underflow, still order correctly.
    """
    p0 = h0.prior
    p1 = 1.0 - p0
    with np.errstate(divide="ignore"):
        log_p0, log_p1 = np.log(p0), np.log(p1)
    a = (log_likelihood(d2, h1) + log_p1) - (log_likelihood(d2, h0) + log_p0)
    return expit(a)


@dataclass(frozen=True)
class LambdaSchedule:
    split_values: tuple[float, ...]
    lambda_top: float
    median: float = 0.0

    def __post_init__(self):
        if any(s < 0 for s in self.split_values):
            raise ScheduleError("split values must be >= 0")
        if not self.split_values or self.lambda_top <= max(self.split_values):
            raise ScheduleError("lambda_top must exceed every split value")

    def hypotheses(self, k: int, prior: float) -> list[tuple[HypothesisSpec, HypothesisSpec]]:
        return [(HypothesisSpec(k, 0.0, s, prior), HypothesisSpec(k, s, self.lambda_top, 1.0 - prior))
                for s in self.split_values]


def lambda_schedule(d2_map, k: int, valid=None, median_of: str = "d2",
                    splits=FIXED_SPLITS, adaptive: bool = True) -> LambdaSchedule:
    """Per-image split points {0, 100, 1000, median/2} and top 1.75 * median.

    The top is floored at 2 * max(split) + k + 1.  That keeps the not-H0
    range non-empty and, for every split, makes its moment-matched variance
    at least that of H0, so confidence stays non-decreasing in the far tail.
    An all-zero map degenerates to splits {0} and top k + 1.
    """
    d2 = np.asarray(d2_map, dtype=np.float64)
    if valid is not None:
        d2 = d2[np.asarray(valid, dtype=bool)]
    d2 = d2.ravel()
    if d2.size == 0:
        raise ScheduleError("no valid pixels to build a lambda schedule from")
    if median_of == "d2":
        med = float(np.median(d2))
    elif median_of == "d":
        med = float(np.median(np.sqrt(d2)))
    else:
        raise ConfigError(f"median_of must be 'd2' or 'd', got {median_of!r}")
    if med == 0.0:
        return LambdaSchedule((0.0,), float(k + 1), med)
    values = set(float(s) for s in splits)
    if adaptive:
        values.add(SPLIT_MEDIAN_FACTOR * med)
    values = tuple(sorted(values))
    top = max(TOP_MEDIAN_FACTOR * med, 2.0 * max(values) + k + 1)
    return LambdaSchedule(values, float(top), med)


@dataclass(frozen=True)
class ConfidenceMap:
    values: np.ndarray   # (H, W) float64 in [0, 1]
    valid: np.ndarray    # (H, W) bool

    def to_float_map(self) -> FloatMap:
        return FloatMap(self.values[None])


def confidence_map(d2_map, k: int, prior: float, schedule: LambdaSchedule, valid=None) -> ConfidenceMap:
    d2 = np.asarray(d2_map, dtype=np.float64)
    valid = np.ones(d2.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    acc = np.zeros_like(d2)
    pairs = schedule.hypotheses(k, prior)
    for h0, h1 in pairs:
        acc += posterior_confidence(d2, h0, h1)
    conf = np.where(valid, acc / len(pairs), 0.0)
    return ConfidenceMap(np.clip(conf, 0.0, 1.0), valid)


def operator_prior(operator: str, scale=None) -> float:
    if scale is not None and not isinstance(scale, tuple):
        scale = (scale.radius, scale.points)
    return _PRIORS.get((operator.lower(), scale), FALLBACK_PRIOR)
