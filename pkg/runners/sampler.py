"""
Sampler - Euler ODE integration from noise to data with none / CFG / PDG guidance

Time runs from t = 1 (noise) to t = 0 (data) on the grid {1, (N-1)/N, ..., 1/N},
with dx/dt = v, so each step is x <- x - v / N.
"""

from typing import List, Optional

import numpy as np
import torch
from loguru import logger

from config.settings import SamplerSpec
from models.sprint_model import SprintDiT
from tools.grid_tools import TokenBatch, grid_positions, unpatchify
from utils.error_handling import LabelError
from utils.validation import require_same_shape


def guided_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """
    v_uncond + w * (v_cond - v_uncond), evaluated as a weighted sum.

    The weighted-sum form returns v_cond exactly at w=1 and v_uncond exactly
    at w=0.
    """
    require_same_shape(v_cond, v_uncond, "guided_velocity")
    return w * v_cond + (1.0 - w) * v_uncond


def pdg_uncond(model: SprintDiT, x_t: TokenBatch, t: torch.Tensor) -> torch.Tensor:
    """
    Path-Drop Guidance unconditional velocity.

    Runs f, the fusion and h only: the padded sparse sequence is M everywhere
    and the class is the null class, so no middle-block parameter is read.

    Args:
        model: SPRINT network
        x_t: Dense noisy tokens (B, N, patch^2*ch)
        t: (B,) times

    Returns:
        torch.Tensor: (B, N, patch^2*ch) velocity
    """
    null = torch.full((x_t.batch_size,), model.null_class, dtype=torch.long, device=x_t.tokens.device)
    return model.forward_full(x_t, t, null, path_drop=True)


def euler_step(x: torch.Tensor, v: torch.Tensor, dt: float) -> torch.Tensor:
    """x' = x - dt * v."""
    require_same_shape(x, v, "euler_step")
    return x - dt * v


def time_grid(steps: int) -> List[float]:
    """Start times of each Euler step: [1, (N-1)/N, ..., 1/N]."""
    return [i / steps for i in range(steps, 0, -1)]


def _check_labels(labels: List[int], num_classes: int) -> torch.Tensor:
    if not labels:
        raise LabelError("at least one class label is required")
    bad = [c for c in labels if not 0 <= int(c) < num_classes]
    if bad:
        raise LabelError(f"labels {bad[:5]} outside [0, {num_classes})")
    return torch.tensor([int(c) for c in labels], dtype=torch.long)


def initial_noise(model: SprintDiT, count: int, seed: int) -> torch.Tensor:
    """x_1 ~ N(0, I) in token space, drawn in one piece so chunking never changes it."""
    cfg = model.config
    noise = np.random.default_rng(seed).standard_normal((count, cfg.num_tokens, cfg.out_channels))
    return torch.from_numpy(noise.astype(np.float32))


@torch.no_grad()
def integrate(model: SprintDiT, x1: torch.Tensor, labels: torch.Tensor, spec: SamplerSpec) -> torch.Tensor:
    """
    Integrate one chunk of token-space noise to t = 0.

    Args:
        model: SPRINT network (evaluated in eval mode)
        x1: (B, N, patch^2*ch) starting noise
        labels: (B,) class labels
        spec: Steps, guidance mode, scale and fusion view

    Returns:
        torch.Tensor: Terminal tokens, same shape as x1
    """
    cfg = model.config
    dtype = next(model.parameters()).dtype
    positions = grid_positions(cfg.rows, cfg.cols)
    null = torch.full_like(labels, model.null_class)
    x = x1.to(dtype)
    dt = 1.0 / spec.steps

    for t_value in time_grid(spec.steps):
        x_t = TokenBatch(tokens=x, positions=positions)
        t = torch.full((x.shape[0],), t_value, dtype=dtype)
        v = model.forward_full(x_t, t, labels, view=spec.view)
        if spec.mode == "cfg":
            v = guided_velocity(v, model.forward_full(x_t, t, null, view=spec.view), spec.w)
        elif spec.mode == "pdg":
            v = guided_velocity(v, pdg_uncond(model, x_t, t), spec.w)
        x = euler_step(x, v, dt)
    return x


def generate(model: SprintDiT, spec: SamplerSpec, labels: Optional[List[int]] = None) -> torch.Tensor:
    """
    Sample one image per requested class label.

    Args:
        model: SPRINT network; typically the EMA copy
        spec: SamplerSpec (steps, mode, w, labels, seed, batch_size, view)
        labels: Overrides spec.labels when given

    Returns:
        torch.Tensor: (len(labels), H, W, ch) images in the model dtype
    """
    cfg = model.config
    label_t = _check_labels(spec.labels if labels is None else labels, cfg.num_classes)
    noise = initial_noise(model, label_t.shape[0], spec.seed)
    was_training = model.training
    model.eval()
    logger.info(f"sampling {label_t.shape[0]} images: mode={spec.mode} w={spec.w} steps={spec.steps}")

    chunks = []
    try:
        for start in range(0, label_t.shape[0], spec.batch_size):
            stop = start + spec.batch_size
            chunks.append(integrate(model, noise[start:stop], label_t[start:stop], spec))
    finally:
        model.train(was_training)

    tokens = TokenBatch(tokens=torch.cat(chunks, dim=0), positions=grid_positions(cfg.rows, cfg.cols))
    return unpatchify(tokens, cfg.patch, cfg.channels)
