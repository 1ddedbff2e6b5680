"""
Metrics Tools - Desk-scale conditional-fidelity metric for blob samples
"""

import numpy as np
import torch
import torch.nn.functional as F

from utils.error_handling import DimensionError, ShapeMismatchError
from utils.validation import require_rank


def predicted_quadrants(samples: torch.Tensor) -> np.ndarray:
    """
    Quadrant of each sample's brightest pixel after 3x3 box smoothing.

    Channels are averaged first. Ties resolve to the lowest flat (row-major)
    pixel index, so an all-constant image maps to quadrant 0.

    Args:
        samples: (B, H, W, ch) images with even, equal H and W

    Returns:
        np.ndarray: (B,) quadrant indices in {0, 1, 2, 3}
    """
    require_rank(samples, 4, "samples")
    b, h, w, _ = samples.shape
    if h != w or h % 2:
        raise DimensionError(f"samples must be square with an even side, got {h}x{w}")
    gray = samples.detach().to(torch.float64).mean(dim=-1, keepdim=True).permute(0, 3, 1, 2)
    smooth = F.avg_pool2d(gray, kernel_size=3, stride=1, padding=1, count_include_pad=False)
    flat = smooth.reshape(b, h * w).cpu().numpy()
    peak = np.argmax(flat, axis=1)
    rows, cols = peak // w, peak % w
    return (rows >= h // 2).astype(np.int64) * 2 + (cols >= w // 2).astype(np.int64)


def quadrant_accuracy(samples: torch.Tensor, labels: torch.Tensor) -> float:
    """
    Fraction of samples whose smoothed peak lies in the labeled quadrant.

    Args:
        samples: (B, H, W, ch) images
        labels: (B,) class labels

    Returns:
        float: Accuracy in [0, 1]; 0.0 for an empty batch
    """
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.shape[0] != samples.shape[0]:
        raise ShapeMismatchError(f"{samples.shape[0]} samples but {labels.shape[0]} labels")
    if labels.shape[0] == 0:
        return 0.0
    hits = predicted_quadrants(samples) == labels.cpu().numpy()
    return float(hits.mean())
