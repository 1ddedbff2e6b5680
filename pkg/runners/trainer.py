"""
Trainer - Masked pre-training and full-token fine-tuning steps

Both phases share one step: draw t and eps, per-sample path-drop and class-drop
flags (independently), run the forward pass, clip, update AdamW, update EMA.
Pre-training additionally draws one DropMask per iteration, last, so the two
phases consume the random stream identically up to that point.
"""

import copy
import math
import time
from dataclasses import dataclass
from typing import Iterable, Literal, Mapping, Optional, Tuple

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict

from config.settings import EMAConfig, MaskTokenConfig, ModelConfig, PhaseConfig, TrainConfig
from models.sprint_model import SprintDiT, create_model
from tools.flow_tools import make_flow_sample, velocity_loss
from tools.grid_tools import patchify
from tools.subsample_tools import draw_mask
from utils.error_handling import MissingGradientError, NonFiniteLossError, PhaseError, ShapeMismatchError

Phase = Literal["pretrain", "finetune"]
TrainBatch = Tuple[torch.Tensor, torch.Tensor]


class StepMetrics(BaseModel):
    """One record per executed training step."""

    model_config = ConfigDict(frozen=True)

    iteration: int
    phase: Phase
    loss: float
    f_grad_norm: float
    grad_norm: float
    lr: float
    wall_ms: float = 0.0


@dataclass
class TrainState:
    """
    Everything a training run mutates.

    Attributes:
        model: Raw parameters
        ema: EMA parameters, same architecture, never trained directly
        optimizer: AdamW over the model's trainable parameters
        rng: Random stream for t, eps, path-drop, class-drop and masks
        data_rng: Random stream for batch selection
        phase: "pretrain" or "finetune"
        iteration: Global step counter
        phase_iteration: Step counter within the current phase
    """

    model: SprintDiT
    ema: SprintDiT
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    data_rng: np.random.Generator
    phase: Phase = "pretrain"
    iteration: int = 0
    phase_iteration: int = 0


def build_optimizer(model: SprintDiT, cfg: TrainConfig, lr: float) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        params, lr=lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay, eps=1e-8, foreach=False
    )


def phase_config(cfg: TrainConfig, phase: Phase) -> PhaseConfig:
    if phase == "pretrain":
        return cfg.pretrain
    if cfg.finetune is None:
        raise PhaseError("finetune phase requested but the configuration has no finetune section")
    return cfg.finetune


def create_train_state(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    mask_token: MaskTokenConfig = MaskTokenConfig(),
    phase: Phase = "pretrain",
) -> TrainState:
    """
    Factory for a fresh training state.

    Args:
        model_cfg: Architecture
        train_cfg: Optimizer, schedule and drop settings
        seed: Seeds parameter init and both random streams
        mask_token: [MASK] vector settings
        phase: Starting phase

    Returns:
        TrainState: EMA initialized as an exact copy of the raw parameters
    """
    model = create_model(model_cfg, mask_token, seed=seed)
    ema = copy.deepcopy(model).requires_grad_(False).eval()
    train_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    optimizer = build_optimizer(model, train_cfg, lr_at(0, phase_config(train_cfg, phase)))
    return TrainState(
        model=model,
        ema=ema,
        optimizer=optimizer,
        rng=np.random.default_rng(train_seq),
        data_rng=np.random.default_rng(data_seq),
        phase=phase,
    )


def begin_finetune(state: TrainState, cfg: TrainConfig) -> TrainState:
    """Switch to the finetune phase with a fresh optimizer at the warmup start LR."""
    finetune = phase_config(cfg, "finetune")
    state.phase = "finetune"
    state.phase_iteration = 0
    state.optimizer = build_optimizer(state.model, cfg, lr_at(0, finetune))
    logger.info(f"finetune phase begins at iteration {state.iteration}")
    return state


def lr_at(iteration: int, cfg: PhaseConfig) -> float:
    """
    Learning rate at a phase-local iteration.

    Linear from lr_start to lr_peak over warmup_iters, constant afterwards.
    """
    if cfg.warmup_iters <= 0 or iteration >= cfg.warmup_iters:
        return cfg.lr_peak
    frac = iteration / cfg.warmup_iters
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac


def ema_decay_at(iteration: int, phase_cfg: PhaseConfig, ema: EMAConfig) -> float:
    return ema.warmup_decay if iteration < phase_cfg.warmup_iters else ema.decay


@torch.no_grad()
def ema_update(ema: SprintDiT, params: SprintDiT, decay: float) -> SprintDiT:
    """
    ema <- decay * ema + (1 - decay) * params, elementwise and in place.

    Returns:
        SprintDiT: The updated EMA module
    """
    ema_params = dict(ema.named_parameters())
    raw_params = dict(params.named_parameters())
    if ema_params.keys() != raw_params.keys():
        raise ShapeMismatchError("EMA and model parameter names differ")
    for name, e in ema_params.items():
        p = raw_params[name]
        if e.shape != p.shape:
            raise ShapeMismatchError(f"{name}: EMA shape {tuple(e.shape)} != {tuple(p.shape)}")
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


def grad_norm_of(names: Iterable[str], grads: Mapping[str, Optional[torch.Tensor]]) -> float:
    """
    L2 norm of the gradients of the named parameters.

    Args:
        names: Parameter selection, e.g. every encoder parameter
        grads: Mapping from parameter name to gradient

    Returns:
        float: sqrt of the summed squared gradient entries
    """
    total = 0.0
    for name in names:
        grad = grads.get(name)
        if grad is None:
            raise MissingGradientError(f"no gradient for parameter '{name}'")
        total += float(grad.detach().double().pow(2).sum())
    return math.sqrt(total)


def clip_gradients(model: SprintDiT, max_norm: float) -> float:
    """Clip the global gradient norm in place; returns the pre-clip norm."""
    params = [p for p in model.parameters() if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm, foreach=False))


def _train_step(state: TrainState, batch: TrainBatch, cfg: TrainConfig, phase: Phase) -> Tuple[TrainState, StepMetrics]:
    if state.phase != phase:
        raise PhaseError(f"{phase} step called while state is in phase '{state.phase}'")
    started = time.perf_counter()
    model, rng = state.model, state.rng
    images, labels = batch
    x0 = patchify(images, model.config.patch)
    b = x0.batch_size

    sample = make_flow_sample(x0.tokens, labels, rng, cfg.time)
    path_drop = torch.from_numpy(rng.random(b) < cfg.path_drop_prob)
    class_drop = torch.from_numpy(rng.random(b) < cfg.class_drop_prob)
    cond_labels = torch.where(class_drop, torch.full_like(labels, model.null_class), labels)
    x_t = x0.with_tokens(sample.x_t)

    model.train()
    if phase == "pretrain":
        mask = draw_mask(model.config.grid, cfg.drop, rng)
        pred = model.forward_pretrain(x_t, sample.t, cond_labels, mask, path_drop)
    else:
        pred = model.forward_full(x_t, sample.t, cond_labels, path_drop)
    loss = velocity_loss(pred, sample.v_target)

    if not bool(torch.isfinite(loss)):
        diagnostics = {
            "iteration": state.iteration,
            "phase": phase,
            "loss": float(loss),
            "t": sample.t.tolist(),
            "labels": cond_labels.tolist(),
            "path_drop": path_drop.tolist(),
        }
        logger.error(f"non-finite loss at iteration {state.iteration}: {diagnostics}")
        raise NonFiniteLossError(state.iteration, diagnostics)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grads = {name: p.grad for name, p in model.named_parameters() if p.grad is not None}
    f_grad_norm = grad_norm_of(model.stage_parameter_names("encoder"), grads)
    grad_norm = clip_gradients(model, cfg.grad_clip)

    schedule = phase_config(cfg, phase)
    lr = lr_at(state.phase_iteration, schedule)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.ema, model, ema_decay_at(state.phase_iteration, schedule, cfg.ema))

    metrics = StepMetrics(
        iteration=state.iteration,
        phase=phase,
        loss=float(loss.detach()),
        f_grad_norm=f_grad_norm,
        grad_norm=grad_norm,
        lr=lr,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
    state.iteration += 1
    state.phase_iteration += 1
    logger.debug(f"{phase} step {metrics.iteration}: loss={metrics.loss:.5f} |grad f|={f_grad_norm:.4f} lr={lr:.2e}")
    return state, metrics


def pretrain_step(state: TrainState, batch: TrainBatch, cfg: TrainConfig) -> Tuple[TrainState, StepMetrics]:
    """
    One masked pre-training step (sparse middle path).

    Args:
        state: Training state in the pretrain phase; updated in place
        batch: (images (B, H, W, ch), labels (B,))
        cfg: Training configuration

    Returns:
        tuple: (state, StepMetrics)
    """
    return _train_step(state, batch, cfg, "pretrain")


def finetune_step(state: TrainState, batch: TrainBatch, cfg: TrainConfig) -> Tuple[TrainState, StepMetrics]:
    """One full-token fine-tuning step; path-drop learning still applies."""
    return _train_step(state, batch, cfg, "finetune")
