"""
SPRINT Model - Dense encoder f, sparse middle g, decoder h, fused by concatenation

    f_t   = f(x_t, c)                     dense, all N tokens
    g_pad = PadWithMask(g(Drop(f_t), c))  sparse deep path, [MASK] at dropped slots
    v     = h(Fusion(f_t, g_pad), c)      dense prediction

Samples flagged for path-drop see M at every position of g_pad.
"""

from typing import Iterator, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from config.settings import FusionView, MaskTokenConfig, ModelConfig
from models.layers import FinalLayer, LabelEmbedder, SprintBlock, TimestepEmbedder, block_forward, fuse
from tools.grid_tools import TokenBatch, build_rope_table
from tools.subsample_tools import DropMask, apply_drop, pad_with_mask
from utils.error_handling import LabelError, MaskError, ShapeMismatchError

STAGES = ("encoder", "middle", "decoder")


class SprintDiT(nn.Module):
    """
    Diffusion transformer with sparse-dense residual fusion.

    Args:
        config: Architecture, including the enc/mid/dec depth split
        mask_token: Initialization and trainability of the [MASK] vector
    """

    def __init__(self, config: ModelConfig, mask_token: MaskTokenConfig = MaskTokenConfig()):
        super().__init__()
        self.config = config
        self.mask_token_config = mask_token
        c = config.hidden

        self.x_embedder = nn.Linear(config.out_channels, c)
        self.t_embedder = TimestepEmbedder(c)
        self.y_embedder = LabelEmbedder(config.num_classes, c)

        def stack(depth: int) -> nn.ModuleList:
            return nn.ModuleList(SprintBlock(c, config.heads, config.mlp_ratio) for _ in range(depth))

        self.encoder = stack(config.enc_depth)
        self.middle = stack(config.mid_depth)
        self.decoder = stack(config.dec_depth)
        self.fusion = nn.Linear(2 * c, c)
        self.mask_token = nn.Parameter(torch.zeros(c), requires_grad=mask_token.trainable)
        self.final_layer = FinalLayer(c, config.out_channels)
        self.rope = build_rope_table(config.head_dim, config.rows, config.cols, config.rope_base)
        self.initialize_weights()

    def initialize_weights(self) -> None:
        def _basic_init(module: nn.Module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        nn.init.normal_(self.y_embedder.embedding_table.weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        with torch.no_grad():
            self.mask_token.normal_(0.0, self.mask_token_config.init_std)

        # AdaLN-zero: every block starts as the identity map
        for block in self.blocks():
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def blocks(self) -> Iterator[SprintBlock]:
        for stage in (self.encoder, self.middle, self.decoder):
            yield from stage

    @property
    def null_class(self) -> int:
        return self.y_embedder.null_class

    def stage_parameter_names(self, stage: str) -> List[str]:
        """Names of the parameters belonging to one of encoder / middle / decoder."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}', expected one of {STAGES}")
        return [name for name, _ in self.named_parameters() if name.startswith(f"{stage}.")]

    def condition(self, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Per-sample conditioning vector: timestep embedding + class embedding."""
        if labels.dtype not in (torch.int32, torch.int64):
            raise LabelError(f"labels must be integers, got {labels.dtype}")
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) > self.null_class):
            raise LabelError(f"labels must lie in [0, {self.null_class}] (null class = {self.null_class})")
        return self.t_embedder(t) + self.y_embedder(labels.long())

    def embed(self, x_t: TokenBatch) -> TokenBatch:
        if x_t.length != self.config.num_tokens or x_t.channels != self.config.out_channels:
            raise ShapeMismatchError(
                f"expected ({self.config.num_tokens}, {self.config.out_channels}) tokens, "
                f"got ({x_t.length}, {x_t.channels})"
            )
        return x_t.with_tokens(self.x_embedder(x_t.tokens))

    def run_stage(self, stage: nn.ModuleList, h: TokenBatch, cond: torch.Tensor) -> TokenBatch:
        for block in stage:
            h = block_forward(block, h, cond, self.rope)
        return h

    def decode(self, fused: TokenBatch, cond: torch.Tensor) -> torch.Tensor:
        h = self.run_stage(self.decoder, fused, cond)
        return self.final_layer(h.tokens, cond)

    def masked_sequence(self, like: TokenBatch) -> torch.Tensor:
        """M repeated at every position of a dense batch."""
        return self.mask_token.to(like.tokens.dtype).expand(like.batch_size, like.length, like.channels)

    def _fusion_inputs(self, f: TokenBatch, g_pad: torch.Tensor, view: FusionView) -> Tuple[TokenBatch, TokenBatch]:
        if view == "both" and not self.config.dense_residual:
            view = "sparse"
        if view == "both":
            return f, f.with_tokens(g_pad)
        if view == "dense":
            return f, f
        if view == "sparse":
            return f.with_tokens(g_pad), f.with_tokens(g_pad)
        raise ValueError(f"unknown fusion view '{view}'")

    def _forward(
        self,
        x_t: TokenBatch,
        t: torch.Tensor,
        labels: torch.Tensor,
        mask: Optional[DropMask],
        path_drop: Union[torch.Tensor, bool, None],
        view: FusionView = "both",
    ) -> torch.Tensor:
        batch = x_t.batch_size
        path_drop = _as_flags(path_drop, batch, x_t.tokens.device)
        if mask is not None and tuple(mask.grid) != self.config.grid:
            raise MaskError(f"mask grid {mask.grid} != model grid {self.config.grid}")
        cond = self.condition(t, labels)
        f = self.run_stage(self.encoder, self.embed(x_t), cond)
        m_seq = self.masked_sequence(f)

        if bool(path_drop.all()):
            g_pad = m_seq
        else:
            if mask is None or mask.keeps_all:
                g_pad = self.run_stage(self.middle, f, cond).tokens
            else:
                sparse = self.run_stage(self.middle, apply_drop(f, mask), cond)
                g_pad = pad_with_mask(sparse, mask, self.mask_token).tokens
            if bool(path_drop.any()):
                g_pad = torch.where(path_drop[:, None, None], m_seq, g_pad)

        dense, padded = self._fusion_inputs(f, g_pad, view)
        return self.decode(fuse(dense, padded, self.fusion), cond)

    def forward_pretrain(
        self,
        x_t: TokenBatch,
        t: torch.Tensor,
        labels: torch.Tensor,
        mask: DropMask,
        path_drop: Union[torch.Tensor, bool, None] = None,
    ) -> torch.Tensor:
        """
        Sparse pre-training forward pass.

        Args:
            x_t: Dense noisy tokens (B, N, patch^2*ch)
            t: (B,) times
            labels: (B,) class labels, null class allowed
            mask: One DropMask shared by the batch
            path_drop: (B,) flags; flagged samples see M on the whole sparse path

        Returns:
            torch.Tensor: Velocity prediction (B, N, patch^2*ch)
        """
        return self._forward(x_t, t, labels, mask, path_drop)

    def forward_full(
        self,
        x_t: TokenBatch,
        t: torch.Tensor,
        labels: torch.Tensor,
        path_drop: Union[torch.Tensor, bool, None] = None,
        view: FusionView = "both",
    ) -> torch.Tensor:
        """Full-token forward pass; identical to forward_pretrain with a keep-all mask."""
        return self._forward(x_t, t, labels, None, path_drop, view)

    def forward(self, x_t: TokenBatch, t: torch.Tensor, labels: torch.Tensor, mask: Optional[DropMask] = None, path_drop=None):
        return self._forward(x_t, t, labels, mask, path_drop)


def _as_flags(path_drop: Union[torch.Tensor, bool, None], batch: int, device) -> torch.Tensor:
    if path_drop is None:
        return torch.zeros(batch, dtype=torch.bool, device=device)
    if isinstance(path_drop, bool):
        return torch.full((batch,), path_drop, dtype=torch.bool, device=device)
    flags = torch.as_tensor(path_drop, dtype=torch.bool, device=device)
    if flags.shape != (batch,):
        raise ShapeMismatchError(f"path_drop must have shape ({batch},), got {tuple(flags.shape)}")
    return flags


def create_model(config: ModelConfig, mask_token: MaskTokenConfig = MaskTokenConfig(), seed: Optional[int] = None) -> SprintDiT:
    """
    Factory for a freshly initialized network.

    Args:
        config: Architecture
        mask_token: [MASK] vector settings
        seed: When given, initialization runs under a forked torch RNG seeded with it

    Returns:
        SprintDiT: Float32 model in training mode
    """
    if seed is None:
        return SprintDiT(config, mask_token)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SprintDiT(config, mask_token)
