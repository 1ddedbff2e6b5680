"""
Subsample Tools - Token-drop masks, dropping, and [MASK] padding

One mask is drawn per training iteration and shared across the batch.
Kept tokens are always presented in ascending original-index order.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from config.settings import DropConfig
from tools.grid_tools import TokenBatch, grid_positions
from utils.error_handling import MaskError, ShapeMismatchError


@dataclass(frozen=True)
class DropMask:
    """
    Keep/drop decision per grid token.

    Attributes:
        keep: (N,) bool tensor
        kept_indices: strictly increasing long tensor of kept token indices
        ratio: Drop ratio r in [0, 1)
        grid: (rows, cols) token grid the mask was drawn for
        group_edge: n for the structured strategy, None for random
        per_group_keep: k for the structured strategy, None for random
    """

    keep: torch.Tensor
    kept_indices: torch.Tensor
    ratio: float
    grid: Tuple[int, int]
    group_edge: Optional[int] = None
    per_group_keep: Optional[int] = None

    @property
    def num_tokens(self) -> int:
        return self.keep.shape[0]

    @property
    def num_kept(self) -> int:
        return self.kept_indices.shape[0]

    @property
    def keeps_all(self) -> bool:
        return self.num_kept == self.num_tokens

    def positions(self, device=None) -> torch.Tensor:
        """Full row-major positions of the grid this mask covers."""
        return grid_positions(*self.grid, device=device)


def _from_keep(keep: np.ndarray, ratio: float, grid: Tuple[int, int], n=None, k=None) -> DropMask:
    keep_t = torch.from_numpy(np.ascontiguousarray(keep, dtype=bool))
    kept = torch.nonzero(keep_t, as_tuple=False).flatten()
    return DropMask(keep=keep_t, kept_indices=kept, ratio=ratio, grid=grid, group_edge=n, per_group_keep=k)


def keep_all_mask(grid: Tuple[int, int]) -> DropMask:
    """Mask that keeps every token (r = 0)."""
    rows, cols = grid
    return _from_keep(np.ones(rows * cols, dtype=bool), 0.0, (rows, cols))


def structured_mask(grid: Tuple[int, int], n: int, k: int, rng: np.random.Generator) -> DropMask:
    """
    Keep exactly k tokens in every non-overlapping n x n group.

    Args:
        grid: (rows, cols) token grid, both divisible by n
        n: Group edge
        k: Tokens kept per group, 1 <= k <= n^2
        rng: Seedable random source owned by the caller

    Returns:
        DropMask: r = 1 - k/n^2
    """
    rows, cols = grid
    if n < 1 or rows % n != 0 or cols % n != 0:
        raise MaskError(f"grid {rows}x{cols} is not divisible into {n}x{n} groups")
    if not 1 <= k <= n * n:
        raise MaskError(f"k={k} must lie in [1, {n * n}]")
    gr, gc = rows // n, cols // n
    # a uniform random permutation per group; its first k slots are kept
    order = np.argsort(rng.random((gr, gc, n * n)), axis=-1)
    keep_in_group = np.zeros((gr, gc, n * n), dtype=bool)
    np.put_along_axis(keep_in_group, order[..., :k], True, axis=-1)
    keep = keep_in_group.reshape(gr, gc, n, n).transpose(0, 2, 1, 3).reshape(rows * cols)
    return _from_keep(keep, 1.0 - k / (n * n), (rows, cols), n=n, k=k)


def num_dropped(n_tokens: int, ratio: float) -> int:
    """floor(r * N), robust to float representation of r."""
    return int(math.floor(round(ratio * n_tokens, 9)))


def random_mask(n_tokens: int, ratio: float, rng: np.random.Generator, grid: Optional[Tuple[int, int]] = None) -> DropMask:
    """
    Drop floor(r*N) distinct tokens uniformly at random.

    Args:
        n_tokens: Sequence length N
        ratio: Drop ratio in [0, 1)
        rng: Seedable random source owned by the caller
        grid: Token grid; defaults to a single row of N tokens

    Returns:
        DropMask: kept_indices ascending
    """
    if not 0.0 <= ratio < 1.0:
        raise MaskError(f"drop ratio {ratio} must lie in [0, 1)")
    grid = grid or (1, n_tokens)
    if grid[0] * grid[1] != n_tokens:
        raise MaskError(f"grid {grid} does not hold {n_tokens} tokens")
    dropped = rng.permutation(n_tokens)[: num_dropped(n_tokens, ratio)]
    keep = np.ones(n_tokens, dtype=bool)
    keep[dropped] = False
    return _from_keep(keep, ratio, grid)


def draw_mask(grid: Tuple[int, int], drop: DropConfig, rng: np.random.Generator) -> DropMask:
    """Draw one mask for an iteration according to the configured strategy."""
    if drop.strategy == "structured":
        return structured_mask(grid, drop.n, drop.k, rng)
    return random_mask(grid[0] * grid[1], drop.ratio, rng, grid=grid)


def apply_drop(tokens: TokenBatch, mask: DropMask) -> TokenBatch:
    """
    Keep only the mask's tokens, carrying their original positions.

    Args:
        tokens: Dense TokenBatch of length N
        mask: DropMask over N tokens

    Returns:
        TokenBatch: Sparse batch of length |kept_indices|
    """
    if tokens.length != mask.num_tokens:
        raise ShapeMismatchError(f"mask covers {mask.num_tokens} tokens, batch has {tokens.length}")
    idx = mask.kept_indices.to(tokens.tokens.device)
    return TokenBatch(
        tokens=tokens.tokens.index_select(1, idx),
        positions=tokens.positions.index_select(0, idx.to(tokens.positions.device)),
    )


def pad_with_mask(sparse: TokenBatch, mask: DropMask, mask_token: torch.Tensor) -> TokenBatch:
    """
    Restore a sparse batch to full length, filling dropped slots with M.

    Args:
        sparse: TokenBatch of length |kept_indices|
        mask: The DropMask that produced it
        mask_token: (C,) vector M

    Returns:
        TokenBatch: Dense batch of length N, row-major positions
    """
    if sparse.length != mask.num_kept:
        raise ShapeMismatchError(f"sparse batch has {sparse.length} tokens, mask keeps {mask.num_kept}")
    if mask_token.shape != (sparse.channels,):
        raise ShapeMismatchError(f"mask token shape {tuple(mask_token.shape)} != ({sparse.channels},)")
    b, _, c = sparse.tokens.shape
    base = mask_token.to(sparse.tokens.dtype).expand(b, mask.num_tokens, c)
    idx = mask.kept_indices.to(sparse.tokens.device)
    dense = base.index_copy(1, idx, sparse.tokens)
    return TokenBatch(tokens=dense, positions=mask.positions(device=sparse.positions.device))
