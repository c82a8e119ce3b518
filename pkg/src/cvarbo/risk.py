"""Seeded Monte Carlo estimation of expected return, VaR, and CVaR.

Two CVaR estimators are provided: a direct order-statistic estimator over
the raw samples and a binned-PDF estimator that first builds an equal-width
histogram of the return distribution and takes the tail expectation over
bin centers. The direct estimator is the default (it has no tuning
parameters); the binned one exists for cross-validation and is selectable
where an estimator choice is exposed.

Sign conventions: sample values are portfolio returns (losses negative).
VaR and CVaR are stated as losses, so both are >= 0 when the tail is in
the red. The tail uses the worst ceil((1-alpha) n) samples, i.e. the lower
empirical quantile convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "RiskLevel",
    "ReturnSamples",
    "HistogramPDF",
    "NormalPriceModel",
    "simulate",
    "expected_return_mc",
    "empirical_var",
    "empirical_cvar",
    "binned_pdf",
    "cvar_from_histogram",
]

# Simulation chunk: keeps the (chunk, n_assets) draw buffer small without
# changing the generated stream (normals are drawn in row-major order).
_CHUNK = 1 << 17


@dataclass(frozen=True)
class RiskLevel:
    """Risk level alpha in (0, 1); the tail carries mass 1 - alpha."""

    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0,1), got {self.alpha}")

    def tail_count(self, n: int) -> int:
        t = (1.0 - self.alpha) * n
        # Guard against float dust: (1-0.95)*100 is 5.000000000000004.
        return max(1, math.ceil(t - 1e-9 - 1e-12 * t))


@dataclass(frozen=True)
class NormalPriceModel:
    """Independent normal model of future prices: one (mean, sd) per asset."""

    means: np.ndarray
    sds: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        sds = np.asarray(self.sds, dtype=float)
        if means.shape != sds.shape or means.ndim != 1:
            raise ValueError("means and sds must be 1-D and the same length")
        if np.any(sds <= 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sds", sds)

    @property
    def dim(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class ReturnSamples:
    """Monte Carlo draws of the (scalar) portfolio return."""

    values: np.ndarray
    seed: int
    n: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape[0] != self.n:
            raise ValueError(f"expected {self.n} values, got {v.shape[0]}")
        object.__setattr__(self, "values", v)


def simulate(return_fn: Callable[[np.ndarray], np.ndarray],
             z_model: NormalPriceModel, n: int, seed: int) -> ReturnSamples:
    """Draw n i.i.d. price vectors and map them through the return function.

    return_fn maps a (chunk, n_assets) matrix of prices to a (chunk,) vector
    of returns. The draw is chunked to bound memory; chunking does not alter
    the generated stream, so values are bit-reproducible for a given seed.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    out = np.empty(n)
    lo = 0
    while lo < n:
        hi = min(lo + _CHUNK, n)
        z = rng.standard_normal(size=(hi - lo, z_model.dim))
        z *= z_model.sds
        z += z_model.means
        out[lo:hi] = return_fn(z)
        lo = hi
    return ReturnSamples(values=out, seed=int(seed), n=n)


def expected_return_mc(s: ReturnSamples) -> float:
    """Arithmetic mean of the sampled returns."""
    return float(s.values.mean())


def _worst(s: ReturnSamples, k: int) -> np.ndarray:
    return np.partition(s.values, k - 1)[:k]


def empirical_var(s: ReturnSamples, level: RiskLevel) -> float:
    """Order-statistic VaR: minus the ceil((1-alpha) n)-th smallest sample."""
    k = level.tail_count(s.n)
    return float(-_worst(s, k)[k - 1])


def empirical_cvar(s: ReturnSamples, level: RiskLevel) -> float:
    """Order-statistic CVaR: minus the mean of the worst ceil((1-alpha) n) samples."""
    k = level.tail_count(s.n)
    if k < 1:
        raise ValueError(f"empty tail: n={s.n} too small for alpha={level.alpha}")
    return float(-_worst(s, k).mean())


@dataclass(frozen=True)
class HistogramPDF:
    """Equal-width binned probability mass on [a, b] with M bins."""

    a: float
    b: float
    m: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (self.m,):
            raise ValueError(f"expected {self.m} bin probabilities, got {p.shape}")
        if np.any(p < 0):
            raise ValueError("bin probabilities must be non-negative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"bin probabilities must sum to 1, got {p.sum()!r}")
        object.__setattr__(self, "probs", p)

    @property
    def width(self) -> float:
        return (self.b - self.a) / self.m

    def centers(self) -> np.ndarray:
        return self.a + (np.arange(self.m) + 0.5) * self.width


def binned_pdf(s: ReturnSamples, a: float, b: float, m: int) -> HistogramPDF:
    """Bin the samples into m equal-width bins on [a, b].

    Samples outside [a, b] are clamped into the end bins so the bin
    probabilities always form a partition of unity.
    """
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    if m < 1:
        raise ValueError("need at least one bin")
    width = (b - a) / m
    idx = np.floor((s.values - a) / width).astype(np.int64)
    np.clip(idx, 0, m - 1, out=idx)
    counts = np.bincount(idx, minlength=m).astype(float)
    return HistogramPDF(a=a, b=b, m=m, probs=counts / s.n)


def cvar_from_histogram(h: HistogramPDF, level: RiskLevel) -> float:
    """Tail expectation over bin centers.

    Accumulates probability mass from the worst (lowest) bin upward until
    the tail mass 1 - alpha is reached, splitting the quantile bin
    fractionally, and returns minus the probability-weighted mean of the
    covered bin centers.
    """
    tau = 1.0 - level.alpha
    centers = h.centers()
    acc = 0.0
    weighted = 0.0
    for p, c in zip(h.probs, centers):
        take = min(p, tau - acc)
        weighted += take * c
        acc += take
        if acc >= tau - 1e-15:
            break
    if acc <= 0.0:
        # All mass above the quantile resolution; fall back to the worst bin.
        nz = np.nonzero(h.probs)[0][0]
        return float(-centers[nz])
    return float(-weighted / acc)
