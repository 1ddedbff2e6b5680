import numpy as np
import pytest
import torch

from config.settings import (
    BlobDatasetSpec,
    DropConfig,
    EMAConfig,
    FinetuneConfig,
    ModelConfig,
    PhaseConfig,
    PretrainConfig,
    TrainConfig,
)
from models.sprint_model import create_model
from runners.trainer import (
    begin_finetune,
    clip_gradients,
    create_train_state,
    ema_update,
    finetune_step,
    grad_norm_of,
    lr_at,
    pretrain_step,
)
from tests.conftest import randomize
from tools.data_tools import BlobDataset, make_blob_batch
from utils.error_handling import MissingGradientError, NonFiniteLossError, PhaseError

DATA = BlobDatasetSpec(image_size=8, size=64)


def _train_cfg(**overrides) -> TrainConfig:
    base = dict(
        batch_size=4,
        drop=DropConfig(n=2, k=1),
        ema=EMAConfig(decay=0.9, warmup_decay=0.5),
        pretrain=PretrainConfig(iters=10, lr_start=1e-3, lr_peak=1e-3),
        finetune=FinetuneConfig(iters=5, lr_start=1e-4, lr_peak=1e-3, warmup_iters=2),
    )
    base.update(overrides)
    return TrainConfig(**base)


def _batch(seed: int):
    return make_blob_batch(DATA, np.random.default_rng(seed), 4)


def _params(model):
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def test_lr_schedule_values():
    warm = PhaseConfig(iters=100_000, lr_start=2e-6, lr_peak=2e-4, warmup_iters=5000)
    assert lr_at(0, warm) == pytest.approx(2e-6)
    assert lr_at(2500, warm) == pytest.approx(1.01e-4)
    assert lr_at(5000, warm) == pytest.approx(2e-4)
    assert lr_at(90_000, warm) == pytest.approx(2e-4)
    assert lr_at(0, PhaseConfig(lr_start=0.5, lr_peak=1e-4, warmup_iters=0)) == 1e-4


def test_ema_update_arithmetic(tiny_config):
    a = create_model(tiny_config, seed=0)
    b = randomize(create_model(tiny_config, seed=0), seed=2)
    start = _params(a)
    ema_update(a, b, 1.0)
    assert all(torch.equal(p, start[n]) for n, p in a.named_parameters())
    ema_update(a, b, 0.5)
    for name, p in a.named_parameters():
        torch.testing.assert_close(p, 0.5 * start[name] + 0.5 * dict(b.named_parameters())[name])
    ema_update(a, b, 0.0)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_grad_norm_of_named_parameters():
    grads = {"a": torch.tensor([3.0, 0.0]), "b": torch.tensor([[4.0]]), "c": None}
    assert grad_norm_of(["a", "b"], grads) == pytest.approx(5.0)
    assert grad_norm_of([], grads) == 0.0
    with pytest.raises(MissingGradientError):
        grad_norm_of(["c"], grads)
    with pytest.raises(KeyError):
        grad_norm_of(["missing"], grads)


def test_clip_gradients_returns_pre_clip_norm():
    layer = torch.nn.Linear(2, 1, bias=False)
    layer.weight.grad = torch.tensor([[6.0, 8.0]])
    assert clip_gradients(layer, 1.0) == pytest.approx(10.0)
    assert float(layer.weight.grad.norm()) == pytest.approx(1.0, rel=1e-5)


def test_step_with_zero_lr_leaves_parameters_unchanged(tiny_config):
    cfg = _train_cfg(pretrain=PretrainConfig(iters=3, lr_start=0.0, lr_peak=0.0))
    state = create_train_state(tiny_config, cfg, seed=0)
    before = _params(state.model)
    state, metrics = pretrain_step(state, _batch(0), cfg)
    assert metrics.lr == 0.0 and metrics.loss > 0
    assert all(torch.equal(p, before[n]) for n, p in state.model.named_parameters())


def test_training_steps_are_deterministic(tiny_config):
    cfg = _train_cfg()
    runs = []
    for _ in range(2):
        state = create_train_state(tiny_config, cfg, seed=11)
        records = []
        for i in range(3):
            state, m = pretrain_step(state, _batch(i), cfg)
            records.append((m.loss, m.f_grad_norm, m.grad_norm))
        runs.append((records, _params(state.model), _params(state.ema)))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert torch.equal(runs[0][1][name], runs[1][1][name])
        assert torch.equal(runs[0][2][name], runs[1][2][name])


def test_finetune_step_equals_pretrain_step_with_keep_all_mask(tiny_config):
    schedule = dict(iters=5, lr_start=1e-3, lr_peak=1e-3, warmup_iters=0)
    cfg = _train_cfg(
        drop=DropConfig(strategy="structured", n=1, k=1),
        pretrain=PretrainConfig(**schedule),
        finetune=FinetuneConfig(**schedule),
    )
    pre = create_train_state(tiny_config, cfg, seed=4, phase="pretrain")
    fine = create_train_state(tiny_config, cfg, seed=4, phase="finetune")
    pre, m_pre = pretrain_step(pre, _batch(0), cfg)
    fine, m_fine = finetune_step(fine, _batch(0), cfg)
    assert m_pre.loss == m_fine.loss
    assert m_pre.f_grad_norm == m_fine.f_grad_norm
    for (name, p), q in zip(pre.model.named_parameters(), fine.model.parameters()):
        assert torch.equal(p, q), name


def test_all_path_drop_never_updates_middle_blocks(tiny_config):
    cfg = _train_cfg(path_drop_prob=1.0)
    state = create_train_state(tiny_config, cfg, seed=0)
    randomize(state.model, seed=8)
    middle_before = {n: p.detach().clone() for n, p in state.model.middle.named_parameters()}
    state, _ = pretrain_step(state, _batch(1), cfg)
    for name, p in state.model.middle.named_parameters():
        assert p.grad is None or float(p.grad.abs().max()) == 0.0
        assert torch.equal(p, middle_before[name]), name
    assert any(p.grad is not None for p in state.model.encoder.parameters())


def test_encoder_gradient_norm_is_reported(tiny_config):
    cfg = _train_cfg()
    state = create_train_state(tiny_config, cfg, seed=0)
    randomize(state.model, seed=1)
    state, metrics = pretrain_step(state, _batch(2), cfg)
    assert metrics.f_grad_norm > 0.0
    assert metrics.grad_norm >= metrics.f_grad_norm
    assert metrics.iteration == 0 and state.iteration == 1 and state.phase_iteration == 1


def test_step_in_wrong_phase_is_rejected(tiny_config):
    cfg = _train_cfg()
    state = create_train_state(tiny_config, cfg, seed=0)
    with pytest.raises(PhaseError):
        finetune_step(state, _batch(0), cfg)


def test_begin_finetune_resets_phase_counter_and_optimizer(tiny_config):
    cfg = _train_cfg()
    state = create_train_state(tiny_config, cfg, seed=0)
    state, _ = pretrain_step(state, _batch(0), cfg)
    old_optimizer = state.optimizer
    state = begin_finetune(state, cfg)
    assert state.phase == "finetune" and state.phase_iteration == 0 and state.iteration == 1
    assert state.optimizer is not old_optimizer
    _, metrics = finetune_step(state, _batch(1), cfg)
    assert metrics.lr == pytest.approx(1e-4)
    with pytest.raises(PhaseError):
        begin_finetune(state, _train_cfg(finetune=None))


def test_non_finite_loss_raises_with_diagnostics(tiny_config):
    cfg = _train_cfg()
    state = create_train_state(tiny_config, cfg, seed=0)
    images, labels = _batch(0)
    images[0, 0, 0, 0] = float("nan")
    before = _params(state.model)
    with pytest.raises(NonFiniteLossError) as info:
        pretrain_step(state, (images, labels), cfg)
    assert info.value.iteration == 0
    assert info.value.diagnostics["phase"] == "pretrain"
    assert state.iteration == 0
    assert all(torch.equal(p, before[n]) for n, p in state.model.named_parameters())


def test_ema_starts_as_copy_of_model(tiny_config):
    state = create_train_state(tiny_config, _train_cfg(), seed=0)
    for p, e in zip(state.model.parameters(), state.ema.parameters()):
        assert torch.equal(p, e)
        assert not e.requires_grad


def test_ema_update_contracts_towards_the_parameters(tiny_config):
    ema = randomize(create_model(tiny_config, seed=0), seed=1).double()
    params = randomize(create_model(tiny_config, seed=0), seed=2).double()

    def distance() -> float:
        return float(torch.sqrt(sum(((e - p) ** 2).sum() for e, p in zip(ema.parameters(), params.parameters()))))

    for decay in (0.999, 0.9, 0.5):
        before = distance()
        with torch.no_grad():
            ema_update(ema, params, decay)
        assert distance() <= decay * before * (1 + 1e-12)


def test_tiny_model_learns_a_fixed_dataset_in_200_steps():
    model_cfg = ModelConfig(enc_depth=1, mid_depth=4, dec_depth=1, hidden=64, heads=4)
    cfg = _train_cfg(batch_size=16, pretrain=PretrainConfig(iters=200, lr_start=1e-3, lr_peak=1e-3))
    data = BlobDataset(BlobDatasetSpec(image_size=16, size=64))
    data_rng = np.random.default_rng(1)
    state = create_train_state(model_cfg, cfg, seed=0)
    losses = []
    for _ in range(200):
        state, metrics = pretrain_step(state, data.sample_batch(data_rng, cfg.batch_size), cfg)
        losses.append(metrics.loss)
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    assert last <= 0.7 * first
