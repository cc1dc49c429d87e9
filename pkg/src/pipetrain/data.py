"""Synthetic datasets for desk-scale experiments.

The default task is seeded Gaussian-cluster classification: one isotropic
cluster per class with means drawn on a sphere, so any run is replayable
from (seed, sample count, dims). An optional loader wraps scikit-learn's
bundled digits subset when that package is available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    batch_size: int

    @property
    def batches_per_epoch(self) -> int:
        return len(self.train_x) // self.batch_size

    def batch(self, batch_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Global batch ids never reset; the epoch wraps the cursor."""
        idx = batch_id % self.batches_per_epoch
        lo = idx * self.batch_size
        hi = lo + self.batch_size
        return self.train_x[lo:hi], self.train_y[lo:hi]

    def epoch_of(self, batch_id: int) -> int:
        return batch_id // self.batches_per_epoch


def gaussian_clusters(
    seed: int,
    samples: int,
    features: int,
    classes: int,
    batch_size: int,
    noise: float = 1.0,
    val_fraction: float = 0.2,
    cluster_spread: float = 3.0,
) -> Dataset:
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(classes, features))
    means *= cluster_spread / np.linalg.norm(means, axis=1, keepdims=True)
    total = int(round(samples * (1.0 + val_fraction)))
    labels = rng.integers(0, classes, size=total)
    x = means[labels] + noise * rng.normal(size=(total, features))
    return Dataset(
        train_x=x[:samples],
        train_y=labels[:samples],
        val_x=x[samples:],
        val_y=labels[samples:],
        batch_size=batch_size,
    )


def digits_subset(batch_size: int = 16, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Small bundled digit images via scikit-learn, when installed."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise ImportError("the digits loader needs scikit-learn installed") from exc
    digits = load_digits()
    x = digits.data.astype(np.float64) / 16.0
    y = digits.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    cut = int(len(x) * (1.0 - val_fraction))
    return Dataset(x[:cut], y[:cut], x[cut:], y[cut:], batch_size)
