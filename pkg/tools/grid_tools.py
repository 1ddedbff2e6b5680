"""
Grid Tools - Patchify/unpatchify, 2D token positions and rotary embeddings

Token channel layout after patchify is (pixel-row, pixel-col, channel),
flattened in that order. Positions are enumerated row-major from (0, 0).
"""

from dataclasses import dataclass
from typing import Tuple

import torch

from utils.error_handling import DimensionError, ShapeMismatchError
from utils.validation import require_divisible, require_rank

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class TokenBatch:
    """
    A batch of token sequences that remembers where each token sits on the grid.

    Attributes:
        tokens: (B, N, C) tensor
        positions: (N, 2) long tensor of (row, col); shared across the batch
    """

    tokens: torch.Tensor
    positions: torch.Tensor

    def __post_init__(self):
        require_rank(self.tokens, 3, "tokens")
        if self.positions.dim() != 2 or self.positions.shape[1] != 2:
            raise ShapeMismatchError(f"positions must be (N, 2), got {tuple(self.positions.shape)}")
        if self.positions.shape[0] != self.tokens.shape[1]:
            raise ShapeMismatchError(
                f"{self.tokens.shape[1]} tokens but {self.positions.shape[0]} positions"
            )

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: torch.Tensor) -> "TokenBatch":
        """Same positions, new token values."""
        return TokenBatch(tokens=tokens, positions=self.positions)


def grid_positions(rows: int, cols: int, device=None) -> torch.Tensor:
    """
    Row-major (row, col) pairs for a rows x cols grid.

    Returns:
        torch.Tensor: (rows*cols, 2) long tensor
    """
    r = torch.arange(rows, device=device).repeat_interleave(cols)
    c = torch.arange(cols, device=device).repeat(rows)
    return torch.stack([r, c], dim=1)


def patchify(images: torch.Tensor, patch: int) -> TokenBatch:
    """
    Cut (B, H, W, ch) images into non-overlapping patch x patch tokens.

    Args:
        images: ImageBatch tensor (B, H, W, ch)
        patch: Patch edge in pixels

    Returns:
        TokenBatch: tokens (B, H*W/patch^2, patch^2*ch), row-major positions
    """
    require_rank(images, 4, "images")
    b, h, w, ch = images.shape
    require_divisible(h, patch, "image height")
    require_divisible(w, patch, "image width")
    rows, cols = h // patch, w // patch
    tokens = (
        images.reshape(b, rows, patch, cols, patch, ch)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, rows * cols, patch * patch * ch)
    )
    return TokenBatch(tokens=tokens, positions=grid_positions(rows, cols, device=images.device))


def grid_shape(positions: torch.Tensor) -> Tuple[int, int]:
    """(rows, cols) spanned by a full row-major position table."""
    if positions.numel() == 0:
        return (0, 0)
    return (int(positions[:, 0].max()) + 1, int(positions[:, 1].max()) + 1)


def unpatchify(tokens: TokenBatch, patch: int, ch: int) -> torch.Tensor:
    """
    Inverse of patchify.

    Args:
        tokens: Dense TokenBatch with row-major positions
        patch: Patch edge in pixels
        ch: Image channels

    Returns:
        torch.Tensor: (B, H, W, ch) images
    """
    if tokens.channels != patch * patch * ch:
        raise ShapeMismatchError(
            f"token channels {tokens.channels} != patch^2*ch = {patch * patch * ch}"
        )
    rows, cols = grid_shape(tokens.positions)
    if rows * cols != tokens.length:
        raise ShapeMismatchError(f"{tokens.length} tokens do not fill a {rows}x{cols} grid")
    b = tokens.batch_size
    return (
        tokens.tokens.reshape(b, rows, cols, patch, patch, ch)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, rows * patch, cols * patch, ch)
    )


@dataclass(frozen=True)
class RopeTable:
    """
    Per-axis rotation angles for 2D RoPE.

    The first half of each head's channels rotates with the row index, the
    second half with the column index; channel pairs are (2i, 2i+1).

    Attributes:
        row_angles: (rows, head_dim // 4) float64 angles
        col_angles: (cols, head_dim // 4) float64 angles
        base: Base frequency
    """

    row_angles: torch.Tensor
    col_angles: torch.Tensor
    base: float = ROPE_BASE

    @property
    def head_dim(self) -> int:
        return 4 * self.row_angles.shape[1]


def build_rope_table(head_dim: int, rows: int, cols: int, base: float = ROPE_BASE) -> RopeTable:
    """
    Precompute the angle table for a rows x cols grid.

    Args:
        head_dim: Channels per attention head, divisible by 4
        rows: Grid rows
        cols: Grid cols
        base: Base frequency

    Returns:
        RopeTable: Angles indexed by (position, frequency pair)
    """
    if head_dim % 4 != 0:
        raise DimensionError(f"head_dim={head_dim} must be divisible by 4 for 2D RoPE")
    axis_dim = head_dim // 2
    inv_freq = 1.0 / (base ** (torch.arange(0, axis_dim, 2, dtype=torch.float64) / axis_dim))
    row_angles = torch.outer(torch.arange(rows, dtype=torch.float64), inv_freq)
    col_angles = torch.outer(torch.arange(cols, dtype=torch.float64), inv_freq)
    return RopeTable(row_angles=row_angles, col_angles=col_angles, base=base)


def _rotate_pairs(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos, sin = torch.cos(angles).to(x.dtype), torch.sin(angles).to(x.dtype)
    out1 = x1 * cos - x2 * sin
    out2 = x1 * sin + x2 * cos
    return torch.stack((out1, out2), dim=-1).flatten(-2)


def rope_apply(vectors: torch.Tensor, positions: torch.Tensor, table: RopeTable) -> torch.Tensor:
    """
    Rotate query/key vectors by their tokens' 2D positions.

    Args:
        vectors: (..., tokens, head_dim) tensor
        positions: (tokens, 2) long tensor of (row, col)
        table: Angle table covering every position

    Returns:
        torch.Tensor: Rotated vectors, same shape; norms are preserved
    """
    head_dim = vectors.shape[-1]
    if head_dim % 4 != 0:
        raise DimensionError(f"head_dim={head_dim} must be divisible by 4 for 2D RoPE")
    if head_dim != table.head_dim:
        raise ShapeMismatchError(f"head_dim {head_dim} != rope table head_dim {table.head_dim}")
    if positions.shape[0] != vectors.shape[-2]:
        raise ShapeMismatchError(f"{vectors.shape[-2]} vectors but {positions.shape[0]} positions")
    pos = positions.to(table.row_angles.device)
    row_angles = table.row_angles[pos[:, 0]]
    col_angles = table.col_angles[pos[:, 1]]
    half = head_dim // 2
    rotated_rows = _rotate_pairs(vectors[..., :half], row_angles.to(vectors.device))
    rotated_cols = _rotate_pairs(vectors[..., half:], col_angles.to(vectors.device))
    return torch.cat([rotated_rows, rotated_cols], dim=-1)
