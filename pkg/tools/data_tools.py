"""
Data Tools - Synthetic class-conditional blob images

Class q in {0, 1, 2, 3} puts one isotropic Gaussian bump inside quadrant q:
0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
"""

from functools import lru_cache
from typing import Tuple

import numpy as np
import torch

from config.settings import BlobDatasetSpec

QUADRANT_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _raw_blobs(spec: BlobDatasetSpec, rng: np.random.Generator, batch: int) -> Tuple[np.ndarray, np.ndarray]:
    size, half = spec.image_size, spec.image_size // 2
    labels = rng.integers(0, spec.classes, size=batch)
    offsets = np.asarray(QUADRANT_OFFSETS)[labels] * half
    # centers stay within [0, half-1] of their quadrant, so the nearest pixel does too
    centers = offsets + rng.uniform(0.0, half - 1, size=(batch, 2))
    amplitude = rng.uniform(spec.amp_low, spec.amp_high, size=batch)

    coords = np.arange(size, dtype=np.float64)
    dy = coords[None, :, None] - centers[:, 0, None, None]
    dx = coords[None, None, :] - centers[:, 1, None, None]
    images = amplitude[:, None, None] * np.exp(-(dy**2 + dx**2) / (2.0 * spec.sigma**2))
    images = np.repeat(images[..., None], spec.channels, axis=-1)
    return images, labels


@lru_cache(maxsize=16)
def dataset_statistics(spec: BlobDatasetSpec) -> Tuple[float, float]:
    """Pixel mean and standard deviation of the fixed reference dataset (spec.size images, spec.seed)."""
    images, _ = _raw_blobs(spec, np.random.default_rng(spec.seed), spec.size)
    return float(images.mean()), float(images.std())


def make_blob_batch(spec: BlobDatasetSpec, rng: np.random.Generator, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Draw a batch of blob images and labels.

    Args:
        spec: Dataset description
        rng: Random source owned by the caller
        batch: Number of images

    Returns:
        tuple: (images (B, H, W, ch) float32 standardized with the dataset's
            pixel mean/std, labels (B,) int64)
    """
    images, labels = _raw_blobs(spec, rng, batch)
    mean, std = dataset_statistics(spec)
    images = (images - mean) / std
    return torch.from_numpy(images.astype(np.float32)), torch.from_numpy(labels.astype(np.int64))


class BlobDataset:
    """Fixed, pre-generated dataset of spec.size images drawn with spec.seed."""

    def __init__(self, spec: BlobDatasetSpec):
        self.spec = spec
        self.images, self.labels = make_blob_batch(spec, np.random.default_rng(spec.seed), spec.size)

    def __len__(self) -> int:
        return self.spec.size

    def sample_batch(self, rng: np.random.Generator, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Uniformly sample batch indices with replacement."""
        idx = torch.from_numpy(rng.integers(0, len(self), size=batch))
        return self.images.index_select(0, idx), self.labels.index_select(0, idx)
