import numpy as np
import pytest
from dataclasses import replace

from shadowpeft.config import TrainConfig, TaskConfig
from shadowpeft.numerics import Tape, Tensor
from shadowpeft.pipeline import ShadowPEFTModel
from shadowpeft.tasks import make_task
from shadowpeft.training import (
    AdamW,
    NonFiniteGradient,
    accuracy,
    base_checksum,
    batch_loss,
    joint_cls_loss,
    joint_lm_loss,
    param_formula,
    param_groups,
    train,
)


def test_joint_lm_loss_decomposes(rng):
    b, s = Tensor(rng.normal(size=(2, 4, 5))), Tensor(rng.normal(size=(2, 4, 5)))
    tg = rng.integers(0, 5, size=(2, 4))
    tg[0, :2] = -100
    total, rep = joint_lm_loss(b, s, tg, 0.05)
    assert abs(rep.total - (rep.base_ce + 0.05 * rep.shadow_ce)) < 1e-12
    _, r0 = joint_lm_loss(b, s, tg, 0.0)
    assert r0.total == r0.base_ce
    with pytest.raises(ValueError):
        joint_lm_loss(b, s, tg, -0.1)


def test_joint_cls_loss_decomposes(rng):
    b, s = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    _, rep = joint_cls_loss(b, s, [0, 1, 2, 1], 0.05)
    assert abs(rep.total - (rep.base_ce + 0.05 * rep.shadow_ce)) < 1e-12
    with pytest.raises(IndexError):
        joint_cls_loss(b, s, [0, 1, 3, 1])


def test_adamw_matches_hand_recursion():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    x = np.array([1.0, -2.0])
    m = v = np.zeros(2)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.0])]
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * 0.01 * x
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)


def test_adamw_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_adamw_names_nonfinite_tensor():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = AdamW([("shadow.w_in", p)])
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteGradient, match="shadow.w_in"):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_only_adapters_receive_updates(small_model, rng):
    from shadowpeft.tasks import Batch

    tg = rng.integers(0, 11, size=(2, 6))
    with Tape() as tape:
        loss, _ = batch_loss(small_model, Batch(rng.integers(0, 11, size=(2, 6)), tg), "lm", 0.05, False, 0)
    tape.backward(loss)
    assert all(t.grad is None for _, t in small_model.base.named_parameters())
    assert small_model.injection.up[1].grad is not None


@pytest.mark.parametrize("seed", range(5))
def test_param_formula_matches_enumeration(seed):
    from shadowpeft.config import AdapterConfig, BaseConfig, ShadowConfig

    r = np.random.default_rng(seed)
    h = int(r.choice([1, 2, 4]))
    base = BaseConfig(vocab_size=int(r.integers(4, 20)), d_model=8 * h, n_layers=int(r.integers(2, 6)), n_heads=h,
                      d_ff=int(r.integers(4, 40)), n_classes=int(r.choice([0, 2, 3])))
    ds = int(r.choice([4, 8, 8 * h]))
    mode = str(r.choice(["implicit", "explicit"]))
    shadow = ShadowConfig(n_layers=1, d_model=ds, n_heads=2 if ds % 2 == 0 else 1, d_ff=int(r.integers(4, 16)), mode=mode)
    adapter = AdapterConfig(rank=int(r.integers(1, 8)), gate_hidden=int(r.integers(0, 9)),
                            update_layernorm=bool(r.integers(0, 2)), update_enabled=bool(r.integers(0, 2)))
    m = ShadowPEFTModel.build(base, shadow, adapter, seed=seed)
    assert param_groups(m) == param_formula(base, shadow, adapter)


def _tiny_task():
    return make_task(TaskConfig(vocab_size=11, seq_len=6, train_size=64, eval_size=32), 0)


def test_train_freezes_base_and_is_deterministic(small_cfgs):
    base_cfg, shadow_cfg, adapter = small_cfgs
    task = _tiny_task()
    cfg = TrainConfig(steps=6, batch_size=4, eval_interval=3)
    runs = []
    for _ in range(2):
        m = ShadowPEFTModel.build(base_cfg, shadow_cfg, replace(adapter, inject_dropout=0.1), seed=1)
        before = base_checksum(m)
        hist = train(m, task, cfg, seed=1)
        assert base_checksum(m) == before
        runs.append([(r.total, r.base_ce, r.shadow_ce) for r in hist.steps])
        assert [e["step"] for e in hist.evals] == [3, 6]
    assert runs[0] == runs[1]


def test_train_rejects_trainable_base(small_model):
    small_model.base.set_trainable(True)
    with pytest.raises(RuntimeError):
        train(small_model, _tiny_task(), TrainConfig(steps=1, batch_size=2))


def test_step0_base_ce_is_independent_of_lambda(small_cfgs):
    base_cfg, shadow_cfg, adapter = small_cfgs
    task = _tiny_task()
    ces = []
    for lam in (0.0, 0.05, 1.0):
        m = ShadowPEFTModel.build(base_cfg, shadow_cfg, adapter, seed=2)
        ces.append(train(m, task, TrainConfig(steps=1, batch_size=4, shadow_loss_weight=lam), seed=2).steps[0].base_ce)
    assert ces[0] == ces[1] == ces[2]


def test_shadow_loss_weight_trains_the_shadow(small_cfgs):
    base_cfg, shadow_cfg, adapter = small_cfgs
    task = _tiny_task()
    out = {}
    for lam in (0.0, 0.05):
        m = ShadowPEFTModel.build(base_cfg, shadow_cfg, adapter, seed=2)
        h = train(m, task, TrainConfig(steps=40, batch_size=8, shadow_loss_weight=lam), seed=2)
        out[lam] = np.mean([r.shadow_ce for r in h.steps[-5:]])
    assert out[0.05] < out[0.0]


def test_accuracy_bounds(small_model):
    acc = accuracy(small_model, _tiny_task().eval)
    assert 0.0 <= acc <= 1.0
