"""
Settings - pydantic configuration models and the flat key-value run document

A run is described by one flat document of ``section.field=value`` lines
(python-dotenv syntax), for example::

    seed=0
    model.hidden=128
    drop.strategy=structured
    mask_token.trainable=true

Every field below carries its documented default. Unknown keys are rejected.
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.error_handling import ConfigError

GuidanceMode = Literal["none", "cfg", "pdg"]
FusionView = Literal["both", "dense", "sparse"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    """Architecture of the SPRINT network; houses the f/g/h depth split."""

    enc_depth: int = Field(2, ge=1, description="blocks in the dense encoder f")
    mid_depth: int = Field(8, ge=1, description="blocks in the sparse middle g")
    dec_depth: int = Field(2, ge=1, description="blocks in the decoder h")
    hidden: int = Field(128, ge=4, description="token channels C")
    heads: int = Field(4, ge=1)
    patch: int = Field(2, ge=1, description="image-space patch edge")
    channels: int = Field(1, ge=1, description="image channels")
    num_classes: int = Field(4, ge=1, description="class vocabulary, excluding the null class")
    rows: int = Field(8, ge=1, description="token grid rows")
    cols: int = Field(8, ge=1, description="token grid cols")
    mlp_ratio: float = Field(4.0, gt=0)
    rope_base: float = Field(10000.0, gt=0)
    dense_residual: bool = Field(True, description="forward encoder features into the fusion")

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if (self.hidden // self.heads) % 4 != 0:
            raise ValueError(f"head_dim={self.hidden // self.heads} must be divisible by 4 for 2D RoPE")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def grid(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    @property
    def depth(self) -> int:
        return self.enc_depth + self.mid_depth + self.dec_depth

    @property
    def out_channels(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.rows * self.patch, self.cols * self.patch, self.channels)


class MaskTokenConfig(_Section):
    trainable: bool = True
    init_std: float = Field(0.02, ge=0)


class DropConfig(_Section):
    """Token-drop strategy for pre-training. Structured: r = 1 - k/n^2."""

    strategy: Literal["structured", "random"] = "structured"
    n: int = Field(2, ge=1, description="group edge")
    k: int = Field(1, ge=1, description="tokens kept per group")
    ratio: float = Field(0.75, ge=0.0, lt=1.0, description="drop ratio for the random strategy")

    @model_validator(mode="after")
    def _check_group(self) -> "DropConfig":
        if self.k > self.n * self.n:
            raise ValueError(f"k={self.k} exceeds group size n^2={self.n * self.n}")
        return self

    @property
    def drop_ratio(self) -> float:
        if self.strategy == "structured":
            return 1.0 - self.k / (self.n * self.n)
        return self.ratio


class TimeConfig(_Section):
    """Logit-normal timestep sampling: t = logistic(loc + scale * z)."""

    loc: float = 0.0
    scale: float = Field(1.0, gt=0)


class EMAConfig(_Section):
    decay: float = Field(0.9999, ge=0.0, le=1.0)
    warmup_decay: float = Field(0.999, ge=0.0, le=1.0)


class PhaseConfig(_Section):
    """Iteration budget and learning-rate schedule of one training phase."""

    iters: int = Field(0, ge=0)
    lr_start: float = Field(1e-4, ge=0)
    lr_peak: float = Field(1e-4, ge=0)
    warmup_iters: int = Field(0, ge=0)


class PretrainConfig(PhaseConfig):
    iters: int = Field(400_000, ge=0)


class FinetuneConfig(PhaseConfig):
    iters: int = Field(100_000, ge=0)
    lr_start: float = Field(2e-6, ge=0)
    lr_peak: float = Field(2e-4, ge=0)
    warmup_iters: int = Field(5_000, ge=0)


class TrainConfig(_Section):
    """Everything the train steps read; sub-sections map to flat prefixes."""

    path_drop_prob: float = Field(0.1, ge=0.0, le=1.0)
    class_drop_prob: float = Field(0.1, ge=0.0, le=1.0)
    grad_clip: float = Field(1.0, gt=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    batch_size: int = Field(256, ge=1)
    drop: DropConfig = DropConfig()
    time: TimeConfig = TimeConfig()
    ema: EMAConfig = EMAConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: Optional[FinetuneConfig] = None


class SamplerSpec(_Section):
    """One generation request: Euler steps, guidance mode and scale, labels."""

    steps: int = Field(50, ge=1)
    mode: GuidanceMode = "pdg"
    w: float = Field(1.0, ge=0.0)
    labels: List[int] = Field(default_factory=list)
    seed: int = 0
    batch_size: int = Field(128, ge=1)
    view: FusionView = "both"


class SampleConfig(_Section):
    """Sampling done at the end of a pipeline run, once per listed mode."""

    steps: int = Field(50, ge=1)
    w: float = Field(2.0, ge=0.0)
    n: int = Field(400, ge=1)
    modes: List[GuidanceMode] = Field(default_factory=lambda: ["none", "cfg", "pdg"])
    seed: int = 1234
    batch_size: int = Field(128, ge=1)
    use_ema: bool = True
    export_images: bool = False

    @field_validator("modes", mode="before")
    @classmethod
    def _split_modes(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [m.strip() for m in value.split(",") if m.strip()]
        return value


class BlobDatasetSpec(_Section):
    """Synthetic class-conditional images: one Gaussian blob per quadrant class."""

    image_size: int = Field(16, ge=2)
    channels: int = Field(1, ge=1)
    classes: int = Field(4, ge=4, le=4)
    sigma: float = Field(1.5, gt=0)
    amp_low: float = Field(0.75, gt=0)
    amp_high: float = Field(1.25, gt=0)
    size: int = Field(4096, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "BlobDatasetSpec":
        if self.image_size % 2 != 0:
            raise ValueError("image_size must be even so quadrants are well defined")
        if self.amp_low > self.amp_high:
            raise ValueError("amp_low must not exceed amp_high")
        return self


class CkptConfig(_Section):
    every: int = Field(1000, ge=1)


class LogConfig(_Section):
    every: int = Field(100, ge=1)
    level: str = "INFO"


class CompareConfig(_Section):
    window: int = Field(50, ge=1, description="trailing steps averaged for the final loss")


class RunConfig(BaseModel):
    """Root of a run: model, training, sampling, dataset, IO paths and seed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    out: str = "runs/desk"
    threads: int = Field(4, ge=1)
    model: ModelConfig = ModelConfig()
    mask_token: MaskTokenConfig = MaskTokenConfig()
    train: TrainConfig = TrainConfig()
    sample: SampleConfig = SampleConfig()
    data: BlobDatasetSpec = BlobDatasetSpec()
    ckpt: CkptConfig = CkptConfig()
    log: LogConfig = LogConfig()
    compare: CompareConfig = CompareConfig()

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        m, d = self.model, self.data
        if m.channels != d.channels:
            raise ValueError(f"model.channels={m.channels} != data.channels={d.channels}")
        if m.image_shape[:2] != (d.image_size, d.image_size):
            raise ValueError(
                f"token grid {m.rows}x{m.cols} at patch {m.patch} does not cover a "
                f"{d.image_size}x{d.image_size} image"
            )
        if m.num_classes != d.classes:
            raise ValueError(f"model.num_classes={m.num_classes} != data.classes={d.classes}")
        drop = self.train.drop
        if drop.strategy == "structured" and (m.rows % drop.n or m.cols % drop.n):
            raise ValueError(f"token grid {m.rows}x{m.cols} is not divisible by drop.n={drop.n}")
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @classmethod
    def from_flat(cls, document: Mapping[str, Optional[str]]) -> "RunConfig":
        """Build a RunConfig from a flat ``section.field`` mapping."""
        try:
            return cls.model_validate(_nest(document))
        except ValidationError as e:
            raise ConfigError(_one_line(e)) from e

    def to_flat(self) -> Dict[str, str]:
        """Flatten back into ``section.field`` keys (resolved run document)."""
        tree = self.model_dump(mode="json")
        flat: Dict[str, str] = {}
        for key in _TOP_LEVEL:
            flat[key] = str(tree[key])
        for prefix, path in _SECTION_PATHS.items():
            node: Any = tree
            for part in path:
                node = node.get(part) if node is not None else None
            if node is None:
                continue
            for field, value in node.items():
                if isinstance(value, dict) or (value is None and field in _NESTED_FIELDS):
                    continue
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                flat[f"{prefix}.{field}"] = str(value)
        return flat


_TOP_LEVEL = ("seed", "out", "threads")
_NESTED_FIELDS = {"drop", "time", "ema", "pretrain", "finetune"}

# flat prefix -> location inside RunConfig
_SECTION_PATHS: Dict[str, Tuple[str, ...]] = {
    "model": ("model",),
    "mask_token": ("mask_token",),
    "train": ("train",),
    "drop": ("train", "drop"),
    "time": ("train", "time"),
    "ema": ("train", "ema"),
    "pretrain": ("train", "pretrain"),
    "finetune": ("train", "finetune"),
    "sample": ("sample",),
    "data": ("data",),
    "ckpt": ("ckpt",),
    "log": ("log",),
    "compare": ("compare",),
}


def _nest(document: Mapping[str, Optional[str]]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    has_finetune = False
    for raw_key, value in document.items():
        key = raw_key.strip()
        if value is None:
            raise ConfigError(f"key '{key}' has no value")
        if "." not in key:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"unknown key '{key}'")
            tree[key] = value
            continue
        prefix, field = key.split(".", 1)
        if prefix not in _SECTION_PATHS or "." in field:
            raise ConfigError(f"unknown key '{key}'")
        has_finetune = has_finetune or prefix == "finetune"
        node = tree
        for part in _SECTION_PATHS[prefix]:
            node = node.setdefault(part, {})
        node[field] = value
    if has_finetune:
        # an empty section is still present
        tree.setdefault("train", {}).setdefault("finetune", {})
    return tree


def _one_line(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(p) for p in first.get("loc", ())) or "config"
    return f"{where}: {first.get('msg', 'invalid value')}"


def apply_env_overrides(config: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """
    Apply SPRINT_SEED and SPRINT_OUT overrides.

    Args:
        config: Parsed run configuration
        environ: Mapping to read from (defaults to os.environ)

    Returns:
        RunConfig: Updated copy, or the same object when nothing is set
    """
    env = os.environ if environ is None else environ
    updates: Dict[str, Any] = {}
    if env.get("SPRINT_SEED"):
        try:
            updates["seed"] = int(env["SPRINT_SEED"])
        except ValueError as e:
            raise ConfigError(f"SPRINT_SEED must be an integer, got {env['SPRINT_SEED']!r}") from e
    if env.get("SPRINT_OUT"):
        updates["out"] = env["SPRINT_OUT"]
    return config.model_copy(update=updates) if updates else config


def load_run_config(path: Optional[Union[str, Path]] = None, use_env: bool = True) -> RunConfig:
    """
    Load a flat run document, validate it, and apply environment overrides.

    Args:
        path: Flat key-value file; None yields the documented defaults
        use_env: Whether SPRINT_SEED / SPRINT_OUT are honoured

    Returns:
        RunConfig: Validated configuration
    """
    document: Dict[str, Optional[str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        document = dict(dotenv_values(path))
    config = RunConfig.from_flat(document)
    return apply_env_overrides(config) if use_env else config
