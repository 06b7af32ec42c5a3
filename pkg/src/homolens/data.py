"""Synthetic noisy binary classification data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, InvalidNoiseRate


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValueError("dataset needs X of shape (n, d) and y of shape (n,)")

    @property
    def n(self):
        return int(self.y.shape[0])

    def replaced(self, i, x, y):
        """Copy with row i swapped for (x, y); every other row is untouched."""
        if not 0 <= i < self.n:
            raise IndexOutOfRange(f"index {i} outside [0, {self.n})")
        X = self.X.copy()
        Y = self.y.copy()
        X[i] = x
        Y[i] = y
        return Dataset(X, Y)


class SyntheticTask:
    """x uniform on the sphere of radius r in R^d, y = sign(w* . x) flipped with probability noise_rate."""

    def __init__(self, d=16, noise_rate=0.3, radius=1.0, w_star=None):
        if not 0.0 <= noise_rate < 0.5:
            raise InvalidNoiseRate(f"noise rate must lie in [0, 0.5), got {noise_rate}")
        if radius <= 0:
            raise ValueError("radius must be positive")
        if w_star is None:
            w_star = np.zeros(d)
            w_star[0] = 1.0
        w_star = np.asarray(w_star, dtype=float)
        if w_star.shape != (d,):
            raise ValueError("w_star must have shape (d,)")
        self.d = int(d)
        self.noise_rate = float(noise_rate)
        self.radius = float(radius)
        self.w_star = w_star / np.linalg.norm(w_star)

    def sample(self, n, rng):
        X = rng.standard_normal((n, self.d))
        X *= self.radius / np.linalg.norm(X, axis=1, keepdims=True)
        y = np.where(X @ self.w_star >= 0, 1.0, -1.0)
        flips = rng.random(n) < self.noise_rate
        y[flips] = -y[flips]
        return Dataset(X, y)

    def to_dict(self):
        return {"d": self.d, "noise_rate": self.noise_rate, "radius": self.radius}


class EmpiricalSampler:
    """Resamples with replacement from a fixed dataset (its empirical distribution)."""

    def __init__(self, dataset):
        self.dataset = dataset
        self.d = dataset.X.shape[1]

    def sample(self, n, rng):
        idx = rng.integers(0, self.dataset.n, size=n)
        return Dataset(self.dataset.X[idx], self.dataset.y[idx])


def gen_task(d, noise_rate, radius, seed, n):
    """Reproducible dataset of n samples from SyntheticTask(d, noise_rate, radius)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    task = SyntheticTask(d, noise_rate, radius)
    return task.sample(n, np.random.default_rng(seed))
