"""
Flow Tools - Linear-interpolant flow matching: x_t, velocity target, timesteps, loss
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from config.settings import TimeConfig
from utils.validation import require_same_shape


def _per_sample(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape[0], *([1] * (like.dim() - 1)))


def interpolate(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor):
    """
    Linear schedule alpha_t = 1 - t, sigma_t = t.

    Args:
        x0: Clean tokens (B, ...)
        eps: Standard-normal noise, same shape
        t: Scalar or (B,) times in [0, 1]

    Returns:
        tuple: (x_t, v_target) with x_t = (1-t) x0 + t eps and v_target = eps - x0
    """
    require_same_shape(x0, eps, "interpolate")
    tt = _per_sample(t, x0)
    x_t = (1 - tt) * x0 + tt * eps
    return x_t, eps - x0


def sample_timestep(batch: int, rng: np.random.Generator, time: TimeConfig = TimeConfig()) -> torch.Tensor:
    """
    Logit-normal timesteps t = logistic(loc + scale * z), z ~ N(0, 1).

    Returns:
        torch.Tensor: (batch,) float32 values strictly inside (0, 1)
    """
    z = time.loc + time.scale * rng.standard_normal(batch)
    t = 1.0 / (1.0 + np.exp(-z))
    # float32 rounding can land exactly on an endpoint for |z| > ~17
    t = np.clip(t, np.nextafter(np.float32(0), np.float32(1)), np.nextafter(np.float32(1), np.float32(0)))
    return torch.from_numpy(t.astype(np.float32))


def velocity_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every batch, token and channel entry."""
    require_same_shape(pred, target, "velocity_loss")
    return F.mse_loss(pred, target, reduction="mean")


@dataclass(frozen=True)
class FlowSample:
    """One training example batch along the linear path."""

    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v_target: torch.Tensor
    labels: torch.Tensor


def make_flow_sample(
    x0: torch.Tensor, labels: torch.Tensor, rng: np.random.Generator, time: TimeConfig = TimeConfig()
) -> FlowSample:
    """
    Draw t and eps for a batch of clean tokens and build the interpolant.

    Args:
        x0: Clean tokens (B, N, C)
        labels: (B,) class labels (the null class is allowed)
        rng: Random source; t is drawn before eps
        time: Timestep distribution parameters

    Returns:
        FlowSample: Fully populated sample
    """
    t = sample_timestep(x0.shape[0], rng, time).to(x0.dtype)
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape)).astype(np.float32)).to(x0.dtype)
    x_t, v_target = interpolate(x0, eps, t)
    return FlowSample(x0=x0, eps=eps, t=t, x_t=x_t, v_target=v_target, labels=labels)
