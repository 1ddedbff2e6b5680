"""
Validation - Shape and range checks that raise the project's error types
"""

import torch

from utils.error_handling import DimensionError, ShapeMismatchError


def require_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    """Raise ShapeMismatchError unless both tensors have identical shapes."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def require_rank(x: torch.Tensor, rank: int, what: str) -> None:
    if x.dim() != rank:
        raise ShapeMismatchError(f"{what}: expected rank {rank}, got shape {tuple(x.shape)}")


def require_divisible(value: int, divisor: int, what: str) -> None:
    if divisor <= 0 or value % divisor != 0:
        raise DimensionError(f"{what}: {value} is not divisible by {divisor}")
