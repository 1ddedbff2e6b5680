"""
Pipeline - Pre-training, fine-tuning, sampling and the run summary

Run directory layout:
    config.env          resolved flat run document
    run.log             loguru file sink
    metrics.jsonl       one record per executed training step
    timings.jsonl       wall-clock per step
    checkpoints/        ckpt_<iteration>.ckpt every ckpt.every steps and at phase ends
    final.ckpt          state after the last executed phase
    samples/<mode>/     sample arrays (and PNGs) per guidance mode
    summary.json        curves, accuracies and FLOPs; byte-reproducible
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict

from clients.checkpoint_client import CheckpointClient
from clients.metrics_log_client import MetricsLogClient
from clients.sample_store_client import SampleStoreClient
from config.settings import DropConfig, GuidanceMode, RunConfig, SampleConfig, SamplerSpec
from models.sprint_model import SprintDiT
from runners.sampler import generate
from runners.trainer import Phase, TrainState, begin_finetune, create_train_state, finetune_step, pretrain_step
from tools.cost_tools import FlopsReport, flops_model, training_flops, training_savings
from tools.data_tools import BlobDataset
from tools.metrics_tools import quadrant_accuracy
from utils.error_handling import NonFiniteLossError, PhaseError
from utils.logging import configure_logging

FIRST_STEPS = 50
SUMMARY_FILE = "summary.json"
PHASES: Sequence[Phase] = ("pretrain", "finetune")


class TrainingCost(BaseModel):
    model_config = ConfigDict(frozen=True)

    sprint: int
    baseline: int
    savings: float


class RunSummary(BaseModel):
    """Everything summary.json reports. Contains no paths or timings."""

    model_config = ConfigDict(frozen=True)

    seed: int
    drop_strategy: str
    drop_ratio: float
    pretrain_steps: int
    finetune_steps: int
    loss_curve: Dict[str, List[float]]
    f_grad_norm_curve: List[float]
    loss_first_steps: float
    loss_final: float
    quadrant_accuracy: Dict[str, float]
    flops: FlopsReport
    training_cost: TrainingCost


class DropComparison(BaseModel):
    """Final pre-training loss per token-drop strategy under identical seeds and budgets."""

    model_config = ConfigDict(frozen=True)

    window: int
    structured: float
    random: float

    @property
    def structured_wins(self) -> bool:
        return self.structured <= self.random


def _setup_torch(config: RunConfig) -> None:
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _write_resolved_config(config: RunConfig, out: Path) -> None:
    lines = [f"{key}={value}" for key, value in config.to_flat().items()]
    (out / "config.env").write_text("\n".join(lines) + "\n")


def _balanced_labels(n: int, num_classes: int) -> List[int]:
    return [i % num_classes for i in range(n)]


def _step_fn(phase: Phase):
    return pretrain_step if phase == "pretrain" else finetune_step


def train_phase(
    state: TrainState,
    dataset: BlobDataset,
    config: RunConfig,
    phase: Phase,
    ckpts: CheckpointClient,
    log: MetricsLogClient,
) -> TrainState:
    """
    Run the remaining iterations of one phase.

    Args:
        state: Training state already in `phase`
        dataset: Blob dataset sampled with state.data_rng
        config: Run configuration
        phase: "pretrain" or "finetune"
        ckpts: Checkpoint writer
        log: Metrics log writer

    Returns:
        TrainState: State after the phase's last iteration
    """
    if state.phase != phase:
        raise PhaseError(f"cannot run {phase} while the state is in phase '{state.phase}'")
    budget = config.train.pretrain.iters if phase == "pretrain" else config.train.finetune.iters
    step = _step_fn(phase)
    if state.phase_iteration >= budget:
        return state

    logger.info(f"{phase}: iterations {state.phase_iteration}..{budget - 1} (global {state.iteration})")
    saved_at = -1
    while state.phase_iteration < budget:
        batch = dataset.sample_batch(state.data_rng, config.train.batch_size)
        state, metrics = step(state, batch, config.train)
        log.append(metrics)
        if state.phase_iteration % config.log.every == 0:
            logger.info(
                f"{phase} {state.phase_iteration}/{budget} loss={metrics.loss:.5f} "
                f"|grad f|={metrics.f_grad_norm:.4f} lr={metrics.lr:.2e}"
            )
        if state.iteration % config.ckpt.every == 0:
            ckpts.save(state)
            saved_at = state.iteration
    if saved_at != state.iteration:
        ckpts.save(state)
    return state


def run_training(
    config: RunConfig,
    resume: Optional[Union[str, Path]] = None,
    phases: Sequence[Phase] = PHASES,
) -> TrainState:
    """
    Train through the requested phases, writing checkpoints and metric logs.

    A finetune phase runs only when the config has a finetune section. On a
    non-finite loss, diagnostics.json and diagnostics.ckpt are written to the
    run directory and the error is re-raised.

    Args:
        config: Run configuration
        resume: Checkpoint to continue from; counters, moments and RNG streams are restored
        phases: Subset of ("pretrain", "finetune") to run

    Returns:
        TrainState: Final state; also saved as final.ckpt
    """
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    configure_logging(config.log.level, out / "run.log")
    _setup_torch(config)
    _write_resolved_config(config, out)

    dataset = BlobDataset(config.data)
    ckpts = CheckpointClient(out / "checkpoints")
    log = MetricsLogClient(out)
    if resume is not None:
        state = ckpts.load(resume, config.train)
        log.truncate_after(state.iteration)
    else:
        state = create_train_state(config.model, config.train, config.seed, config.mask_token)
        log.reset()

    try:
        if "pretrain" in phases and state.phase == "pretrain":
            state = train_phase(state, dataset, config, "pretrain", ckpts, log)
        if "finetune" in phases:
            if config.train.finetune is None:
                logger.info("no finetune section: finetune phase skipped")
            else:
                if state.phase == "pretrain":
                    state = begin_finetune(state, config.train)
                state = train_phase(state, dataset, config, "finetune", ckpts, log)
    except NonFiniteLossError as e:
        (out / "diagnostics.json").write_text(json.dumps(e.diagnostics, indent=2, sort_keys=True))
        ckpts.save(state, out / "diagnostics.ckpt")
        logger.error(f"training halted: {e}; partial artifacts kept in {out}")
        raise

    ckpts.save(state, out / "final.ckpt")
    return state


def sample_modes(model: SprintDiT, config: RunConfig, out: Optional[Path] = None) -> Dict[str, float]:
    """
    Generate config.sample.n balanced samples per guidance mode and score them.

    Returns:
        dict: mode -> quadrant accuracy
    """
    sample = config.sample
    labels = _balanced_labels(sample.n, config.model.num_classes)
    accuracies: Dict[str, float] = {}
    for mode in sample.modes:
        spec = SamplerSpec(
            steps=sample.steps, mode=mode, w=sample.w, labels=labels, seed=sample.seed, batch_size=sample.batch_size
        )
        images = generate(model, spec)
        accuracies[mode] = quadrant_accuracy(images, torch.tensor(labels))
        logger.info(f"mode={mode} w={sample.w}: quadrant accuracy {accuracies[mode]:.4f}")
        if out is not None:
            SampleStoreClient(out / "samples" / mode).save(images, labels, export_images=sample.export_images)
    return accuracies


def evaluate_guidance(
    model: SprintDiT,
    sample: SampleConfig,
    mode: GuidanceMode,
    scales: Sequence[float],
    out: Optional[Path] = None,
) -> Dict[float, float]:
    """
    Quadrant accuracy per guidance scale for one mode.

    Args:
        model: Network to sample from
        sample: Supplies steps, sample count, seed and batch size
        mode: Guidance mode
        scales: Guidance scales to sweep
        out: When given, samples are written under out/w_<scale>/

    Returns:
        dict: scale -> accuracy
    """
    labels = _balanced_labels(sample.n, model.config.num_classes)
    results: Dict[float, float] = {}
    for w in scales:
        spec = SamplerSpec(steps=sample.steps, mode=mode, w=w, labels=labels, seed=sample.seed, batch_size=sample.batch_size)
        images = generate(model, spec)
        results[w] = quadrant_accuracy(images, torch.tensor(labels))
        logger.info(f"mode={mode} w={w:g}: quadrant accuracy {results[w]:.4f}")
        if out is not None:
            SampleStoreClient(Path(out) / f"w_{w:g}").save(images, labels)
    return results


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def build_summary(config: RunConfig, log: MetricsLogClient, accuracies: Dict[str, float]) -> RunSummary:
    frame = log.read()
    losses = frame["loss"].tolist()
    curves = {phase: frame.loc[frame["phase"] == phase, "loss"].tolist() for phase in PHASES}
    report = flops_model(config.model, config.train.drop.drop_ratio, "pretrain")
    pretrain_steps, finetune_steps = len(curves["pretrain"]), len(curves["finetune"])
    batch = config.train.batch_size
    sprint = training_flops(report.sparse_forward, pretrain_steps, batch) + training_flops(
        report.dense_forward, finetune_steps, batch
    )
    return RunSummary(
        seed=config.seed,
        drop_strategy=config.train.drop.strategy,
        drop_ratio=config.train.drop.drop_ratio,
        pretrain_steps=pretrain_steps,
        finetune_steps=finetune_steps,
        loss_curve=curves,
        f_grad_norm_curve=frame["f_grad_norm"].tolist(),
        loss_first_steps=_mean(losses[:FIRST_STEPS]),
        loss_final=_mean(losses[-config.compare.window :]),
        quadrant_accuracy=accuracies,
        flops=report,
        training_cost=TrainingCost(
            sprint=sprint,
            baseline=training_flops(report.baseline_forward, pretrain_steps + finetune_steps, batch),
            savings=training_savings(report, pretrain_steps, finetune_steps, batch),
        ),
    )


def write_summary(summary: RunSummary, out: Path) -> Path:
    path = out / SUMMARY_FILE
    path.write_text(json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    return path


def run_pipeline(
    config: RunConfig,
    resume: Optional[Union[str, Path]] = None,
    phases: Sequence[Phase] = PHASES,
) -> RunSummary:
    """
    Pre-train, fine-tune, sample with every configured guidance mode, summarize.

    Args:
        config: Run configuration
        resume: Optional checkpoint to continue from
        phases: Phases to run (the finetune CLI passes only "finetune")

    Returns:
        RunSummary: Also written to <out>/summary.json
    """
    state = run_training(config, resume=resume, phases=phases)
    model = state.ema if config.sample.use_ema else state.model
    accuracies = sample_modes(model, config, config.out_dir)
    summary = build_summary(config, MetricsLogClient(config.out_dir), accuracies)
    path = write_summary(summary, config.out_dir)
    logger.info(f"run complete: loss {summary.loss_first_steps:.4f} -> {summary.loss_final:.4f}; summary at {path}")
    return summary


def compare_drop_strategies(config: RunConfig) -> DropComparison:
    """
    Pre-train the same configuration once per token-drop strategy.

    Both runs share seed, budget and drop ratio (the random strategy uses the
    structured ratio 1 - k/n^2). Runs go to <out>/compare/<strategy>/.

    Returns:
        DropComparison: Mean of the last compare.window losses for each strategy
    """
    drop = config.train.drop
    ratio = drop.drop_ratio
    finals: Dict[str, float] = {}
    for strategy in ("structured", "random"):
        variant_drop = DropConfig(strategy=strategy, n=drop.n, k=drop.k, ratio=ratio)
        variant = config.model_copy(
            update={
                "out": str(config.out_dir / "compare" / strategy),
                "train": config.train.model_copy(update={"drop": variant_drop}),
            }
        )
        run_training(variant, phases=("pretrain",))
        losses = MetricsLogClient(variant.out_dir).read()["loss"].tolist()
        finals[strategy] = _mean(losses[-config.compare.window :])
        logger.info(f"{strategy}: final pre-training loss {finals[strategy]:.5f}")
    return DropComparison(window=config.compare.window, **finals)
