"""
Shared fixtures: tiny model configs, seeded generators and run documents
"""

from pathlib import Path
from typing import Dict

import numpy as np
import pytest
import torch

from config.settings import ModelConfig, RunConfig
from models.sprint_model import SprintDiT, create_model

REPO_ROOT = Path(__file__).resolve().parents[1]


def randomize(model: SprintDiT, seed: int = 0, std: float = 0.2) -> SprintDiT:
    """Overwrite every parameter so no gate or head is zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
            if "norm" in name:
                p.copy_(1.0 + 0.1 * noise)
            else:
                p.copy_(std * noise)
    return model


def tiny_run_document(out: Path, finetune: bool = True) -> Dict[str, str]:
    doc = {
        "seed": "3",
        "out": str(out),
        "threads": "1",
        "model.enc_depth": "1",
        "model.mid_depth": "2",
        "model.dec_depth": "1",
        "model.hidden": "16",
        "model.heads": "2",
        "model.rows": "4",
        "model.cols": "4",
        "model.patch": "2",
        "drop.n": "2",
        "drop.k": "1",
        "train.batch_size": "4",
        "pretrain.iters": "6",
        "pretrain.lr_start": "0.001",
        "pretrain.lr_peak": "0.001",
        "ema.decay": "0.9",
        "ema.warmup_decay": "0.5",
        "sample.steps": "3",
        "sample.n": "8",
        "sample.batch_size": "8",
        "data.image_size": "8",
        "data.size": "64",
        "ckpt.every": "4",
        "log.every": "2",
        "log.level": "WARNING",
        "compare.window": "3",
    }
    if finetune:
        doc.update(
            {
                "finetune.iters": "3",
                "finetune.lr_start": "0.0001",
                "finetune.lr_peak": "0.001",
                "finetune.warmup_iters": "2",
            }
        )
    return doc


@pytest.fixture
def tiny_config() -> ModelConfig:
    """4x4 token grid over 8x8 single-channel images, split 1-2-1, C=16."""
    return ModelConfig(enc_depth=1, mid_depth=2, dec_depth=1, hidden=16, heads=2, patch=2, rows=4, cols=4)


@pytest.fixture
def tiny_model(tiny_config) -> SprintDiT:
    return randomize(create_model(tiny_config, seed=0), seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_run(tmp_path) -> RunConfig:
    return RunConfig.from_flat(tiny_run_document(tmp_path / "run"))
