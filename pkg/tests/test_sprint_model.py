import copy

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from config.settings import MaskTokenConfig, ModelConfig
from models.layers import SprintBlock, block_forward, fuse
from models.sprint_model import SprintDiT, create_model
from tests.conftest import randomize
from tools.flow_tools import velocity_loss
from tools.grid_tools import TokenBatch, build_rope_table, grid_positions, patchify
from tools.subsample_tools import apply_drop, keep_all_mask, pad_with_mask, structured_mask
from utils.error_handling import LabelError, MaskError, ShapeMismatchError


def _inputs(cfg: ModelConfig, batch: int = 3, seed: int = 0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    h, w, ch = cfg.image_shape
    x_t = patchify(torch.randn(batch, h, w, ch, generator=gen, dtype=torch.float64).to(dtype), cfg.patch)
    t = torch.rand(batch, generator=gen, dtype=torch.float64).to(dtype)
    labels = torch.arange(batch) % (cfg.num_classes + 1)
    return x_t, t, labels


def _perturb_middle(model: SprintDiT, seed: int = 99) -> SprintDiT:
    other = copy.deepcopy(model)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in other.middle.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 3.0)
    return other


def test_fresh_block_is_identity():
    block = SprintBlock(16, 2)
    torch.nn.init.zeros_(block.adaLN_modulation[-1].weight)
    torch.nn.init.zeros_(block.adaLN_modulation[-1].bias)
    x = TokenBatch(tokens=torch.randn(2, 16, 16), positions=grid_positions(4, 4))
    out = block_forward(block, x, torch.randn(2, 16), build_rope_table(8, 4, 4))
    assert torch.equal(out.tokens, x.tokens)


def test_fresh_model_blocks_are_identity_and_head_is_zero(tiny_config):
    model = create_model(tiny_config, seed=0)
    x_t, t, labels = _inputs(tiny_config)
    cond = model.condition(t, labels)
    h = model.embed(x_t)
    assert torch.equal(model.run_stage(model.encoder, h, cond).tokens, h.tokens)
    assert torch.equal(model.run_stage(model.middle, h, cond).tokens, h.tokens)
    out = model.forward_full(x_t, t, labels)
    assert torch.equal(out, torch.zeros_like(out))


def test_fresh_model_output_is_head_of_normalized_fusion(tiny_config):
    model = create_model(tiny_config, seed=0).double()
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        head = model.final_layer.linear
        head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=torch.float64))
        head.bias.copy_(torch.randn(head.bias.shape, generator=gen, dtype=torch.float64))
    x_t, t, labels = _inputs(tiny_config, dtype=torch.float64)
    f = model.embed(x_t)

    def expected(padded: torch.Tensor) -> torch.Tensor:
        fused = fuse(f, f.with_tokens(padded), model.fusion).tokens
        return head(F.layer_norm(fused, (tiny_config.hidden,), eps=1e-6))

    dropped = model.forward_full(x_t, t, labels, path_drop=True)
    torch.testing.assert_close(dropped, expected(model.masked_sequence(f)))
    torch.testing.assert_close(model.forward_full(x_t, t, labels), expected(f.tokens))
    assert dropped.abs().max() > 0


def test_create_model_is_seeded(tiny_config):
    a = create_model(tiny_config, seed=5)
    b = create_model(tiny_config, seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_pretrain_with_keep_all_mask_equals_full(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    path_drop = torch.tensor([False, True, False])
    full = tiny_model.forward_full(x_t, t, labels, path_drop)
    sparse = tiny_model.forward_pretrain(x_t, t, labels, keep_all_mask(tiny_config.grid), path_drop)
    assert torch.equal(full, sparse)


def test_pretrain_output_depends_on_mask(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    mask = structured_mask(tiny_config.grid, 2, 1, np.random.default_rng(0))
    out = tiny_model.forward_pretrain(x_t, t, labels, mask)
    assert out.shape == (3, tiny_config.num_tokens, tiny_config.out_channels)
    assert not torch.allclose(out, tiny_model.forward_full(x_t, t, labels))


def test_mask_for_another_grid_is_rejected_on_every_path(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    foreign = structured_mask((8, 8), 2, 1, np.random.default_rng(0))
    with pytest.raises(MaskError):
        tiny_model.forward_pretrain(x_t, t, labels, foreign)
    with pytest.raises(MaskError):
        tiny_model.forward_pretrain(x_t, t, labels, foreign, path_drop=True)
    # same token count, different shape
    with pytest.raises(MaskError):
        tiny_model.forward_pretrain(x_t, t, labels, keep_all_mask((2, 8)))


def test_sparse_fusion_ignores_order_of_kept_tokens(tiny_config):
    model = randomize(create_model(tiny_config, seed=0), seed=1).double()
    x_t, t, labels = _inputs(tiny_config, dtype=torch.float64)
    cond = model.condition(t, labels)
    f = model.run_stage(model.encoder, model.embed(x_t), cond)
    mask = structured_mask(tiny_config.grid, 2, 1, np.random.default_rng(3))
    sparse = apply_drop(f, mask)

    perm = torch.arange(sparse.length).flip(0)
    shuffled = model.run_stage(model.middle, TokenBatch(sparse.tokens[:, perm], sparse.positions[perm]), cond)
    inverse = torch.argsort(perm)
    restored = TokenBatch(shuffled.tokens[:, inverse], shuffled.positions[inverse])
    assert torch.equal(restored.positions, sparse.positions)

    in_order = pad_with_mask(model.run_stage(model.middle, sparse, cond), mask, model.mask_token)
    reordered = pad_with_mask(restored, mask, model.mask_token)
    fused = fuse(f, in_order, model.fusion).tokens
    torch.testing.assert_close(fuse(f, reordered, model.fusion).tokens, fused)
    torch.testing.assert_close(model.decode(f.with_tokens(fused), cond), model.forward_pretrain(x_t, t, labels, mask))


def test_path_drop_output_ignores_middle_blocks(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    perturbed = _perturb_middle(tiny_model)
    a = tiny_model.forward_full(x_t, t, labels, path_drop=True)
    b = perturbed.forward_full(x_t, t, labels, path_drop=True)
    assert float((a - b).abs().max()) == 0.0
    # sanity: without path-drop the perturbation is visible
    assert not torch.equal(tiny_model.forward_full(x_t, t, labels), perturbed.forward_full(x_t, t, labels))


def test_mixed_path_drop_matches_per_sample_runs(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    flags = torch.tensor([True, False, True])
    mixed = tiny_model.forward_full(x_t, t, labels, flags)
    dropped = tiny_model.forward_full(x_t, t, labels, True)
    kept = tiny_model.forward_full(x_t, t, labels, False)
    torch.testing.assert_close(mixed[flags], dropped[flags])
    torch.testing.assert_close(mixed[~flags], kept[~flags])


def test_dense_view_ignores_middle_and_sparse_view_matches_ablation(tiny_model, tiny_config):
    x_t, t, labels = _inputs(tiny_config)
    perturbed = _perturb_middle(tiny_model)
    assert torch.equal(
        tiny_model.forward_full(x_t, t, labels, view="dense"),
        perturbed.forward_full(x_t, t, labels, view="dense"),
    )
    ablated = SprintDiT(tiny_config.model_copy(update={"dense_residual": False}))
    ablated.load_state_dict(tiny_model.state_dict())
    assert torch.equal(
        ablated.forward_full(x_t, t, labels),
        tiny_model.forward_full(x_t, t, labels, view="sparse"),
    )


def test_fuse_selects_either_half_with_block_identity_weights():
    c = 4
    dense = TokenBatch(tokens=torch.randn(2, 3, c), positions=grid_positions(1, 3))
    padded = dense.with_tokens(torch.randn(2, 3, c))
    proj = torch.nn.Linear(2 * c, c)
    with torch.no_grad():
        proj.bias.zero_()
        proj.weight.copy_(torch.cat([torch.eye(c), torch.zeros(c, c)], dim=1))
    torch.testing.assert_close(fuse(dense, padded, proj).tokens, dense.tokens, rtol=0, atol=1e-7)
    with torch.no_grad():
        proj.weight.copy_(torch.cat([torch.zeros(c, c), torch.eye(c)], dim=1))
    torch.testing.assert_close(fuse(dense, padded, proj).tokens, padded.tokens, rtol=0, atol=1e-7)


def test_fuse_is_linear_in_its_inputs():
    c = 4
    proj = torch.nn.Linear(2 * c, c, bias=False).double()
    pos = grid_positions(1, 5)
    a, b, d, e = (torch.randn(1, 5, c, dtype=torch.float64) for _ in range(4))
    lhs = fuse(TokenBatch(a + 2 * d, pos), TokenBatch(b + 2 * e, pos), proj).tokens
    rhs = fuse(TokenBatch(a, pos), TokenBatch(b, pos), proj).tokens + 2 * fuse(TokenBatch(d, pos), TokenBatch(e, pos), proj).tokens
    torch.testing.assert_close(lhs, rhs)


def test_fuse_rejects_mismatched_inputs():
    proj = torch.nn.Linear(8, 4)
    dense = TokenBatch(tokens=torch.zeros(1, 3, 4), positions=grid_positions(1, 3))
    with pytest.raises(ShapeMismatchError):
        fuse(dense, TokenBatch(tokens=torch.zeros(1, 2, 4), positions=grid_positions(1, 2)), proj)
    with pytest.raises(ShapeMismatchError):
        fuse(dense, dense, torch.nn.Linear(4, 4))


def test_block_is_permutation_equivariant_with_positions():
    block = randomize(SprintDiT(ModelConfig(hidden=16, heads=2, rows=4, cols=4, enc_depth=1, mid_depth=1, dec_depth=1))).encoder[0]
    block = block.double()
    rope = build_rope_table(8, 4, 4)
    x = TokenBatch(tokens=torch.randn(2, 16, 16, dtype=torch.float64), positions=grid_positions(4, 4))
    cond = torch.randn(2, 16, dtype=torch.float64)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    out = block_forward(block, x, cond, rope).tokens
    shuffled = TokenBatch(tokens=x.tokens[:, perm], positions=x.positions[perm])
    torch.testing.assert_close(block_forward(block, shuffled, cond, rope).tokens, out[:, perm])


def test_mask_token_trainability_follows_config(tiny_config):
    assert create_model(tiny_config).mask_token.requires_grad
    frozen = create_model(tiny_config, MaskTokenConfig(trainable=False))
    assert not frozen.mask_token.requires_grad


def test_labels_outside_vocabulary_are_rejected(tiny_model, tiny_config):
    x_t, t, _ = _inputs(tiny_config)
    with pytest.raises(LabelError):
        tiny_model.forward_full(x_t, t, torch.tensor([0, 1, tiny_config.num_classes + 1]))


def test_stage_parameter_names_partition_blocks(tiny_model):
    enc = tiny_model.stage_parameter_names("encoder")
    mid = tiny_model.stage_parameter_names("middle")
    assert enc and mid and not set(enc) & set(mid)
    with pytest.raises(ValueError):
        tiny_model.stage_parameter_names("fusion")


# --- gradient check: analytic vs central finite differences -----------------

GRAD_CONFIG = ModelConfig(enc_depth=1, mid_depth=1, dec_depth=1, hidden=8, heads=2, patch=2, rows=4, cols=4)
FD_SAMPLES = 200
FD_STEP = 1e-5


def _loss(model: SprintDiT, dtype, x_t, t, labels, mask, path_drop, target):
    x = x_t.with_tokens(x_t.tokens.to(dtype))
    pred = model.forward_pretrain(x, t.to(dtype), labels, mask, path_drop)
    return velocity_loss(pred, target.to(dtype))


def _worst_gradient_error(dtype, floor: float):
    model64 = randomize(create_model(GRAD_CONFIG, seed=0), seed=3).double()
    x_t, t, labels = _inputs(GRAD_CONFIG, batch=2, seed=4, dtype=torch.float64)
    target = torch.randn(x_t.tokens.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    mask = structured_mask(GRAD_CONFIG.grid, 2, 2, np.random.default_rng(6))
    path_drop = torch.tensor([False, True])
    args = (x_t, t, labels, mask, path_drop, target)

    model = copy.deepcopy(model64).to(dtype)
    model.zero_grad()
    _loss(model, dtype, *args).backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
    g_inf = max(float(p.grad.abs().max()) for _, p in named)
    params64 = dict(model64.named_parameters())

    rng = np.random.default_rng(7)
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    worst = 0.0
    for _ in range(FD_SAMPLES):
        name, p = named[rng.choice(len(named), p=sizes / sizes.sum())]
        idx = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[idx])
        ref = params64[name].data.reshape(-1)
        original = float(ref[idx])
        with torch.no_grad():
            ref[idx] = original + FD_STEP
            plus = float(_loss(model64, torch.float64, *args))
            ref[idx] = original - FD_STEP
            minus = float(_loss(model64, torch.float64, *args))
            ref[idx] = original
        numeric = (plus - minus) / (2 * FD_STEP)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), floor * g_inf))
    return worst


def test_gradients_match_finite_differences_float64():
    """Relative error |a - n| / max(|n|, 1e-4 * max|grad|) below 1e-5."""
    assert _worst_gradient_error(torch.float64, floor=1e-4) < 1e-5


def test_gradients_match_finite_differences_float32():
    """Relative error |a - n| / max(|n|, 1e-2 * max|grad|) below 1e-3."""
    assert _worst_gradient_error(torch.float32, floor=1e-2) < 1e-3
