"""
Checkpoint Client - Portable on-disk training state

File layout:
    8 bytes   magic b"SPRINTCK"
    4 bytes   header length, uint32 little-endian
    n bytes   JSON header (sorted keys, UTF-8)
    payload   float32 little-endian tensors, concatenated in header order

Tensor names: params/<name>, ema/<name>, optim/step/<name>,
optim/exp_avg/<name>, optim/exp_avg_sq/<name>. Parameters that never received a
gradient carry no optimizer tensors. Nothing in the file depends on
wall-clock time, so identical runs write identical bytes.
"""

import copy
import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError

from config.settings import MaskTokenConfig, ModelConfig, TrainConfig
from models.sprint_model import SprintDiT
from runners.trainer import Phase, TrainState, build_optimizer, lr_at, phase_config
from utils.error_handling import CheckpointError

MAGIC = b"SPRINTCK"
FORMAT_VERSION = 1


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    shape: List[int]
    offset: int  # in float32 elements from the payload start


class CheckpointHeader(BaseModel):
    """Everything in a checkpoint except the tensor payload."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    model: ModelConfig
    mask_token: MaskTokenConfig
    phase: Phase
    iteration: int
    phase_iteration: int
    optimizer_step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    data_rng_state: Optional[Dict[str, Any]] = None
    entries: List[TensorEntry] = []


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False).tobytes()


def write_checkpoint(path: Union[str, Path], header: CheckpointHeader, tensors: Dict[str, torch.Tensor]) -> Path:
    """
    Serialize named tensors with a header.

    Args:
        path: Destination file; parent directories are created
        header: Metadata; its entries are rebuilt from `tensors`
        tensors: Insertion-ordered name -> tensor mapping

    Returns:
        Path: The written file
    """
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, tensor in tensors.items():
        entries.append(TensorEntry(name=name, shape=list(tensor.shape), offset=offset))
        chunks.append(_tensor_bytes(tensor))
        offset += tensor.numel()
    header = header.model_copy(update={"entries": entries})
    blob = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointHeader, Dict[str, torch.Tensor]]:
    """
    Parse a checkpoint file.

    Returns:
        tuple: (header, name -> float32 tensor)

    Raises:
        CheckpointError: Missing file, bad magic, truncated payload or header
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a SPRINT checkpoint")
    start = len(MAGIC) + 4
    if len(data) < start:
        raise CheckpointError(f"{path} is truncated")
    (length,) = struct.unpack("<I", data[len(MAGIC) : start])
    try:
        header = CheckpointHeader.model_validate(json.loads(data[start : start + length].decode("utf-8")))
    except (ValueError, ValidationError) as e:
        raise CheckpointError(f"{path}: malformed header ({e.__class__.__name__})") from e
    if header.format_version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.format_version}")

    raw = data[start + length :]
    if len(raw) % 4:
        raise CheckpointError(f"{path}: payload is not a whole number of float32 values")
    payload = np.frombuffer(raw, dtype="<f4")
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header.entries:
        count = int(np.prod(entry.shape, dtype=np.int64))
        if entry.offset + count > payload.shape[0]:
            raise CheckpointError(f"{path}: payload truncated at '{entry.name}'")
        values = payload[entry.offset : entry.offset + count].astype(np.float32)
        tensors[entry.name] = torch.from_numpy(values.reshape(entry.shape))
    return header, tensors


def _load_module(module: SprintDiT, tensors: Dict[str, torch.Tensor], prefix: str) -> None:
    with torch.no_grad():
        for name, param in module.named_parameters():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint has no tensor '{key}'")
            if tuple(tensors[key].shape) != tuple(param.shape):
                raise CheckpointError(f"'{key}' has shape {tuple(tensors[key].shape)}, expected {tuple(param.shape)}")
            param.copy_(tensors[key].to(param.dtype))


def _build_models(header: CheckpointHeader, tensors: Dict[str, torch.Tensor]) -> Tuple[SprintDiT, SprintDiT]:
    model = SprintDiT(header.model, header.mask_token)
    _load_module(model, tensors, "params")
    ema = copy.deepcopy(model).requires_grad_(False).eval()
    _load_module(ema, tensors, "ema")
    return model, ema


def _trainable_names(model: SprintDiT) -> List[str]:
    return [name for name, p in model.named_parameters() if p.requires_grad]


class CheckpointClient:
    """Saves and restores TrainState under one run directory."""

    def __init__(self, root: Union[str, Path]):
        """
        Initialize the checkpoint client.

        Args:
            root: Directory holding ckpt_<iteration>.ckpt files
        """
        self.root = Path(root)

    def path_for(self, iteration: int) -> Path:
        return self.root / f"ckpt_{iteration:07d}.ckpt"

    def checkpoints(self) -> List[Path]:
        return sorted(self.root.glob("ckpt_*.ckpt"))

    def latest(self) -> Optional[Path]:
        found = self.checkpoints()
        return found[-1] if found else None

    def save(self, state: TrainState, path: Optional[Union[str, Path]] = None) -> Path:
        """
        Write raw params, EMA params, AdamW moments, counters and RNG states.

        Args:
            state: Training state to persist
            path: Explicit destination; defaults to path_for(state.iteration)

        Returns:
            Path: The written checkpoint
        """
        model = state.model
        tensors: Dict[str, torch.Tensor] = {}
        for name, p in model.named_parameters():
            tensors[f"params/{name}"] = p
        for name, p in state.ema.named_parameters():
            tensors[f"ema/{name}"] = p

        step = 0
        params = dict(model.named_parameters())
        for name in _trainable_names(model):
            slot = state.optimizer.state.get(params[name], {})
            if "exp_avg" in slot:
                tensors[f"optim/step/{name}"] = torch.as_tensor(slot["step"]).reshape(())
                tensors[f"optim/exp_avg/{name}"] = slot["exp_avg"]
                tensors[f"optim/exp_avg_sq/{name}"] = slot["exp_avg_sq"]
                step = max(step, int(slot["step"]))

        header = CheckpointHeader(
            model=model.config,
            mask_token=model.mask_token_config,
            phase=state.phase,
            iteration=state.iteration,
            phase_iteration=state.phase_iteration,
            optimizer_step=step,
            rng_state=state.rng.bit_generator.state,
            data_rng_state=state.data_rng.bit_generator.state,
        )
        written = write_checkpoint(path or self.path_for(state.iteration), header, tensors)
        logger.info(f"checkpoint saved: {written}")
        return written

    @staticmethod
    def load_models(path: Union[str, Path]) -> Tuple[SprintDiT, SprintDiT, CheckpointHeader]:
        """Rebuild (raw model, EMA model, header) from a checkpoint."""
        header, tensors = read_checkpoint(path)
        model, ema = _build_models(header, tensors)
        return model, ema, header

    def load(self, path: Union[str, Path], train_cfg: TrainConfig) -> TrainState:
        """
        Restore a TrainState that continues exactly where the saved one stopped.

        Args:
            path: Checkpoint file
            train_cfg: Training configuration (optimizer hyperparameters)

        Returns:
            TrainState: Model, EMA, AdamW moments, counters and RNG streams restored
        """
        header, tensors = read_checkpoint(path)
        model, ema = _build_models(header, tensors)
        optimizer = build_optimizer(model, train_cfg, lr_at(header.phase_iteration, phase_config(train_cfg, header.phase)))
        if header.optimizer_step > 0:
            params = dict(model.named_parameters())
            for name in _trainable_names(model):
                key = f"optim/exp_avg/{name}"
                if key not in tensors:
                    continue
                p = params[name]
                optimizer.state[p] = {
                    "step": tensors[f"optim/step/{name}"].clone(),
                    "exp_avg": tensors[key].to(p.dtype).clone(),
                    "exp_avg_sq": tensors[f"optim/exp_avg_sq/{name}"].to(p.dtype).clone(),
                }

        rng = np.random.default_rng()
        data_rng = np.random.default_rng()
        if header.rng_state is None or header.data_rng_state is None:
            raise CheckpointError(f"{path}: checkpoint carries no random-stream state")
        rng.bit_generator.state = header.rng_state
        data_rng.bit_generator.state = header.data_rng_state
        logger.info(f"resumed {header.phase} at iteration {header.iteration} from {path}")
        return TrainState(
            model=model,
            ema=ema,
            optimizer=optimizer,
            rng=rng,
            data_rng=data_rng,
            phase=header.phase,
            iteration=header.iteration,
            phase_iteration=header.phase_iteration,
        )
