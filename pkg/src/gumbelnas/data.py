"""Synthetic two-modality XOR task.

Each example carries two latent bits ``a`` and ``b``. Modality 1 sees only
``a`` and modality 2 only ``b`` (each through a fixed random linear map plus
Gaussian noise), and the label is ``a XOR b``, so neither modality alone is
informative about the label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression

from .seeding import derive_rng

NOISE_SIGMA = 0.3
PROBE_CEILING = 0.60


@dataclass(frozen=True)
class Split:
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]

    def batch(self, idx) -> "Split":
        return Split(self.x1[idx], self.x2[idx], self.y[idx])


@dataclass(frozen=True)
class SyntheticBimodalDataset:
    train: Split
    val: Split
    test: Split
    latents: np.ndarray
    probe_accuracy: tuple[float, float]
    seed: int

    @property
    def dims(self) -> tuple[int, int]:
        return self.train.x1.shape[1], self.train.x2.shape[1]


def _probe(train: np.ndarray, y_train, val: np.ndarray, y_val) -> float:
    clf = LogisticRegression(max_iter=1000).fit(train, y_train)
    return float(clf.score(val, y_val))


def make_synthetic_bimodal(seed: int, n: int = 2000, d1: int = 8, d2: int = 8) -> SyntheticBimodalDataset:
    if n < 1000:
        raise ValueError(f"n must be >= 1000, got {n}")
    if d1 < 1 or d2 < 1:
        raise ValueError(f"modality dims must be positive, got ({d1}, {d2})")
    rng = derive_rng(seed, "dataset")
    latents = rng.integers(0, 2, size=(n, 2))
    a, b = latents[:, 0], latents[:, 1]
    labels = a ^ b
    map1 = rng.normal(size=(1, d1))
    map2 = rng.normal(size=(1, d2))
    x1 = (2.0 * a - 1.0)[:, None] @ map1 + NOISE_SIGMA * rng.normal(size=(n, d1))
    x2 = (2.0 * b - 1.0)[:, None] @ map2 + NOISE_SIGMA * rng.normal(size=(n, d2))

    order = rng.permutation(n)
    n_train, n_val = int(0.70 * n), int(0.15 * n)
    parts = np.split(order, [n_train, n_train + n_val])
    train, val, test = (Split(x1[p], x2[p], labels[p]) for p in parts)

    probe = (
        _probe(train.x1, train.y, val.x1, val.y),
        _probe(train.x2, train.y, val.x2, val.y),
    )
    if max(probe) > PROBE_CEILING:
        raise RuntimeError(f"single-modality probe accuracy {probe} exceeds {PROBE_CEILING}")
    return SyntheticBimodalDataset(train, val, test, latents[order], probe, int(seed))
