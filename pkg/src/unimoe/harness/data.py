"""Synthetic image-classification task made of Gaussian token clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng
from .config import DataSpec

__all__ = ["Dataset", "generate_synthetic_task"]


@dataclass
class Dataset:
    tokens: np.ndarray  # (N, T, D)
    labels: np.ndarray  # (N,) int
    centroids: np.ndarray  # (classes, D)

    def __len__(self) -> int:
        return self.tokens.shape[0]


def generate_synthetic_task(spec: DataSpec, rng: Rng) -> Dataset:
    """Each image is ``T`` tokens ``centroid[label] + spread * N(0, I)``.

    Centroids are standard normal in ``R^D``; labels are balanced round-robin
    and then shuffled.
    """
    centroids = rng.normal((spec.classes, spec.dim))
    labels = np.arange(spec.images) % spec.classes
    labels = labels[rng.permutation(spec.images)]
    noise = rng.normal((spec.images, spec.tokens_per_image, spec.dim), spec.spread) if spec.spread > 0 else 0.0
    tokens = centroids[labels][:, None, :] + noise
    tokens = np.broadcast_to(tokens, (spec.images, spec.tokens_per_image, spec.dim)).copy()
    return Dataset(tokens, labels.astype(np.int64), centroids)
