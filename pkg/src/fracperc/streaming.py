"""Single-pass sample moments with exact pairwise merging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class StreamingMoments:
    """Running count, mean, comoment matrix and 3rd/4th central sums for K components.

    Merging uses the pairwise update formulas for central moment sums, so
    accumulating chunks and merging them agrees with one sequential pass
    up to rounding.
    """

    K: int
    n: int = 0
    mean: np.ndarray = None
    C: np.ndarray = None  # sum of (x - mean)(x - mean)^T
    M3: np.ndarray = None
    M4: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.K)
            self.C = np.zeros((self.K, self.K))
            self.M3 = np.zeros(self.K)
            self.M4 = np.zeros(self.K)

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "StreamingMoments":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n, K = x.shape
        acc = cls(K)
        if n == 0:
            return acc
        # shift by the first row: identical samples give exactly zero deviations
        shift = x[0]
        mean = shift + (x - shift).mean(axis=0)
        dev = x - mean
        acc.n = n
        acc.mean = mean
        acc.C = dev.T @ dev
        acc.M3 = (dev**3).sum(axis=0)
        acc.M4 = (dev**4).sum(axis=0)
        return acc

    def update(self, x: np.ndarray) -> "StreamingMoments":
        """Fold a batch of samples (rows) into the accumulator in place."""
        other = StreamingMoments.from_samples(x)
        merged = self.merge(other)
        self.n, self.mean, self.C, self.M3, self.M4 = merged.n, merged.mean, merged.C, merged.M3, merged.M4
        return self

    def merge(self, other: "StreamingMoments") -> "StreamingMoments":
        if self.K != other.K:
            raise ValueError("component counts differ")
        if other.n == 0:
            return self.copy()
        if self.n == 0:
            return other.copy()
        na, nb = float(self.n), float(other.n)
        n = na + nb
        delta = other.mean - self.mean
        mean = self.mean + delta * nb / n
        C = self.C + other.C + np.outer(delta, delta) * na * nb / n
        a2, b2 = np.diag(self.C), np.diag(other.C)
        M3 = (self.M3 + other.M3 + delta**3 * na * nb * (na - nb) / n**2
              + 3 * delta * (na * b2 - nb * a2) / n)
        M4 = (self.M4 + other.M4 + delta**4 * na * nb * (na * na - na * nb + nb * nb) / n**3
              + 6 * delta**2 * (na * na * b2 + nb * nb * a2) / n**2
              + 4 * delta * (na * other.M3 - nb * self.M3) / n)
        return StreamingMoments(self.K, self.n + other.n, mean, C, M3, M4)

    def copy(self) -> "StreamingMoments":
        return StreamingMoments(self.K, self.n, self.mean.copy(), self.C.copy(), self.M3.copy(), self.M4.copy())

    # statistics

    @property
    def variance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros(self.K)
        return np.diag(self.C) / (self.n - 1)

    @property
    def covariance(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros((self.K, self.K))
        return self.C / (self.n - 1)

    def correlation(self) -> np.ndarray:
        """Sample correlations; NaN where a component has zero variance."""
        cov = self.covariance
        sd = np.sqrt(np.diag(cov))
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = cov / np.outer(sd, sd)
        corr[np.outer(sd, sd) == 0] = np.nan
        return corr

    @property
    def se_mean(self) -> np.ndarray:
        if self.n < 2:
            return np.full(self.K, math.inf)
        return np.sqrt(self.variance / self.n)

    @property
    def se_variance(self) -> np.ndarray:
        """Asymptotic SE of the sample variance: sqrt((mu4 - s^4 (n-3)/(n-1)) / n)."""
        n = self.n
        if n < 4:
            return np.full(self.K, math.inf)
        s2 = self.variance
        mu4 = self.M4 / n
        return np.sqrt(np.maximum(mu4 - s2 * s2 * (n - 3) / (n - 1), 0.0) / n)

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean.tolist(), "C": self.C.tolist(),
                "M3": self.M3.tolist(), "M4": self.M4.tolist()}
