"""
Cost Tools - Analytical FLOPs model of the SPRINT forward pass

FLOPs count multiplies and adds separately (1 MAC = 2 FLOPs). Counts are per
sample; batch multiplicity is applied by training_flops.
"""

from typing import Dict, Literal

from pydantic import BaseModel, ConfigDict

from config.settings import ModelConfig
from tools.subsample_tools import num_dropped

FlopsMode = Literal["pretrain", "full"]

ELEMENTWISE = 5  # normalizations, residual adds, activations per token-channel
MODULATION = 6  # AdaLN shift/scale/gate for attention and MLP


def flops_matmul(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


def flops_block(tokens: int, channels: int, heads: int, mlp_ratio: int = 4) -> int:
    """
    FLOPs of one transformer block over `tokens` tokens.

    Args:
        tokens: Sequence length seen by the block
        channels: Hidden width C
        heads: Attention heads (does not change the count, C must divide)
        mlp_ratio: Feed-forward expansion

    Returns:
        int: QKV/output projections + score/value matmuls + feed-forward
            + AdaLN modulation + elementwise terms
    """
    if channels % heads != 0:
        raise ValueError(f"channels={channels} is not divisible by heads={heads}")
    c = channels
    projections = 4 * flops_matmul(tokens, c, c)
    scores_values = 2 * flops_matmul(tokens, tokens, c)
    feed_forward = 2 * flops_matmul(tokens, c, mlp_ratio * c)
    modulation = flops_matmul(tokens, c, MODULATION * c)
    elementwise = ELEMENTWISE * tokens * c
    return projections + scores_values + feed_forward + modulation + elementwise


def flops_fusion(tokens: int, channels: int) -> int:
    """Linear 2C -> C over every token."""
    return flops_matmul(tokens, 2 * channels, channels)


def flops_conditioning(channels: int, frequency_dim: int = 256) -> int:
    """Timestep MLP plus class lookup/add; per sample, independent of N."""
    return flops_matmul(1, frequency_dim, channels) + flops_matmul(1, channels, channels) + channels


class FlopsReport(BaseModel):
    """
    Per-stage and per-mode FLOPs of one forward pass, per sample.

    Stage counts follow the requested mode; mode totals are always filled.
    """

    model_config = ConfigDict(frozen=True)

    mode: FlopsMode
    drop_ratio: float
    tokens: int
    sparse_tokens: int
    embedder: int
    encoder: int
    middle: int
    decoder: int
    fusion: int
    output_head: int
    conditioning: int
    dense_forward: int
    sparse_forward: int
    pdg_uncond_forward: int
    cfg_step: int
    pdg_step: int
    baseline_forward: int

    def stages(self) -> Dict[str, int]:
        return {
            "embedder": self.embedder,
            "encoder": self.encoder,
            "middle": self.middle,
            "decoder": self.decoder,
            "fusion": self.fusion,
            "output_head": self.output_head,
        }

    def totals(self) -> Dict[str, int]:
        return {
            "dense_forward": self.dense_forward,
            "sparse_forward": self.sparse_forward,
            "pdg_uncond_forward": self.pdg_uncond_forward,
            "cfg_step": self.cfg_step,
            "pdg_step": self.pdg_step,
            "baseline_forward": self.baseline_forward,
        }


def flops_model(cfg: ModelConfig, r: float = 0.0, mode: FlopsMode = "pretrain") -> FlopsReport:
    """
    Price every stage of the network analytically.

    Args:
        cfg: Architecture (grid sets N)
        r: Token drop ratio applied before the middle blocks
        mode: "pretrain" prices g at N - floor(rN) tokens, "full" at N

    Returns:
        FlopsReport: Stage counts plus dense, sparse, PDG and CFG totals
    """
    n = cfg.num_tokens
    c, heads, ratio = cfg.hidden, cfg.heads, int(cfg.mlp_ratio)
    sparse_n = n - num_dropped(n, r)

    def stage(depth: int, tokens: int) -> int:
        return depth * flops_block(tokens, c, heads, ratio)

    embedder = flops_matmul(n, cfg.out_channels, c)
    head = flops_matmul(n, c, cfg.out_channels) + flops_matmul(1, c, 2 * c) + ELEMENTWISE * n * c
    encoder = stage(cfg.enc_depth, n)
    decoder = stage(cfg.dec_depth, n)
    fusion = flops_fusion(n, c)
    shallow = embedder + encoder + fusion + decoder + head

    dense_forward = shallow + stage(cfg.mid_depth, n)
    sparse_forward = shallow + stage(cfg.mid_depth, sparse_n)
    pdg_uncond = shallow
    middle_tokens = sparse_n if mode == "pretrain" else n

    return FlopsReport(
        mode=mode,
        drop_ratio=r,
        tokens=n,
        sparse_tokens=middle_tokens,
        embedder=embedder,
        encoder=encoder,
        middle=stage(cfg.mid_depth, middle_tokens),
        decoder=decoder,
        fusion=fusion,
        output_head=head,
        conditioning=flops_conditioning(c),
        dense_forward=dense_forward,
        sparse_forward=sparse_forward,
        pdg_uncond_forward=pdg_uncond,
        cfg_step=2 * dense_forward,
        pdg_step=dense_forward + pdg_uncond,
        baseline_forward=embedder + stage(cfg.depth, n) + head,
    )


def training_flops(forward: int, iters: int, batch: int) -> int:
    """Training cost with backward priced at 2x forward."""
    return 3 * forward * iters * batch


def training_savings(report: FlopsReport, pretrain_iters: int, finetune_iters: int, batch: int) -> float:
    """Dense-baseline training cost over SPRINT's (sparse pretrain + dense finetune) cost."""
    sprint = training_flops(report.sparse_forward, pretrain_iters, batch) + training_flops(
        report.dense_forward, finetune_iters, batch
    )
    baseline = training_flops(report.baseline_forward, pretrain_iters + finetune_iters, batch)
    return baseline / sprint if sprint else 0.0
