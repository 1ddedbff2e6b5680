"""
Layers - Embedders, AdaLN-zero transformer block, output head and fusion projection
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from tools.grid_tools import RopeTable, TokenBatch, rope_apply
from utils.error_handling import ShapeMismatchError

# t in [0, 1] is stretched before the sinusoidal features
TIME_SCALE = 1000.0


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of t followed by a two-layer perceptron."""

    def __init__(self, hidden: int, frequency_dim: int = 256):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
        )

    @staticmethod
    def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
        )
        args = (t.to(torch.float64) * TIME_SCALE)[:, None] * freqs[None]
        features = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if dim % 2:
            features = torch.cat([features, torch.zeros_like(features[:, :1])], dim=-1)
        return features

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        weight = self.mlp[0].weight
        features = self.timestep_features(t, self.frequency_dim).to(weight.dtype)
        return self.mlp(features)


class LabelEmbedder(nn.Module):
    """Class embedding table with one extra row for the null class."""

    def __init__(self, num_classes: int, hidden: int):
        super().__init__()
        self.num_classes = num_classes
        self.embedding_table = nn.Embedding(num_classes + 1, hidden)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.embedding_table(labels)


class Attention(nn.Module):
    """Multi-head self-attention with RMS-normalized queries/keys and 2D RoPE."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.q_norm = nn.RMSNorm(self.head_dim, eps=1e-6)
        self.k_norm = nn.RMSNorm(self.head_dim, eps=1e-6)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, positions: torch.Tensor, rope: RopeTable) -> torch.Tensor:
        b, n, c = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4).unbind(0)
        q = rope_apply(self.q_norm(q), positions, rope)
        k = rope_apply(self.k_norm(k), positions, rope)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, hidden: int, ratio: float = 4.0):
        super().__init__()
        inner = int(hidden * ratio)
        self.fc1 = nn.Linear(hidden, inner)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(inner, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SprintBlock(nn.Module):
    """
    Transformer block with AdaLN-zero conditioning.

    The six modulation vectors (shift/scale/gate for attention and MLP) come
    from the per-sample conditioning vector; the gates start at zero, so a
    fresh block is the identity map.
    """

    def __init__(self, hidden: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.hidden = hidden
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden, mlp_ratio)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))

    def forward(self, x: torch.Tensor, positions: torch.Tensor, cond: torch.Tensor, rope: RopeTable) -> torch.Tensor:
        if x.shape[-1] != self.hidden:
            raise ShapeMismatchError(f"block expects {self.hidden} channels, got {x.shape[-1]}")
        if cond.shape != (x.shape[0], self.hidden):
            raise ShapeMismatchError(f"conditioning shape {tuple(cond.shape)} != ({x.shape[0]}, {self.hidden})")
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(cond).chunk(6, dim=-1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa), positions, rope)
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


def block_forward(block: SprintBlock, tokens: TokenBatch, cond: torch.Tensor, rope: RopeTable) -> TokenBatch:
    """Run one block on a TokenBatch, using each token's carried position for RoPE."""
    return tokens.with_tokens(block(tokens.tokens, tokens.positions, cond, rope))


class FinalLayer(nn.Module):
    """Output head: modulated LayerNorm and a linear map to patch pixels."""

    def __init__(self, hidden: int, out_channels: int):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden, out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(cond).chunk(2, dim=-1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


def fuse(dense: TokenBatch, padded: TokenBatch, projection: nn.Linear) -> TokenBatch:
    """
    Sparse-dense residual fusion: project concat(dense, padded) from 2C back to C.

    Args:
        dense: Encoder features f_t, length N
        padded: Mask-padded middle features g_pad, length N
        projection: Linear map 2C -> C

    Returns:
        TokenBatch: Fused features with the dense batch's positions
    """
    if dense.tokens.shape != padded.tokens.shape:
        raise ShapeMismatchError(
            f"fusion inputs differ: {tuple(dense.tokens.shape)} vs {tuple(padded.tokens.shape)}"
        )
    if projection.in_features != 2 * dense.channels or projection.out_features != dense.channels:
        raise ShapeMismatchError(
            f"projection {projection.in_features}->{projection.out_features} does not map 2C->C for C={dense.channels}"
        )
    return dense.with_tokens(projection(torch.cat([dense.tokens, padded.tokens], dim=-1)))
