"""Acceptance criteria.

Each test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion, aggregated over its tests.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from shadowpeft import checkpoint
from shadowpeft.backbone import Backbone
from shadowpeft.config import AdapterConfig, BaseConfig, ShadowConfig, TaskConfig, default_config
from shadowpeft.crossscale import (
    ReferenceShadowLM,
    attach_explicit_shadow,
    detached_ce,
    pinv_init_projection,
    pretrain_reference,
    projection_complement_norm,
)
from shadowpeft.numerics import Tensor, gated_update, sigmoid, stream
from shadowpeft.pipeline import ForwardTrace, ShadowPEFTModel
from shadowpeft.runner import build_model, gradcheck_pipeline, resolve_lora, run_training
from shadowpeft.shadow import ShadowState
from shadowpeft.tasks import Batch, make_task
from shadowpeft.training import base_checksum, batch_loss, param_groups, pretrain_base, train
from shadowpeft.update import Update

from conftest import randomize_adapters

LAMBDA = 0.05


def crit(n, title):
    return pytest.mark.criterion(n, title)


# 1

@crit(1, "zero-init identity: fresh attached forward == frozen base forward, bitwise")
def test_zero_init_identity(record_property):
    cfg = default_config()
    model = build_model(cfg)
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(100):
        B, T = int(rng.integers(1, 5)), int(rng.integers(1, cfg.base.max_seq + 1))
        x = rng.integers(0, cfg.base.vocab_size, size=(B, T))
        got = model.attached_forward(x, training=False).base_logits.data
        assert np.array_equal(got, model.base.forward(x).data)
    elapsed = time.perf_counter() - start
    record_property("detail", f"100 inputs in {elapsed:.2f}s")
    assert elapsed < 5.0


# 2

@crit(2, "full-pipeline gradient check, max rel-err < 1e-4")
@pytest.mark.parametrize("loss_state", ["initial", "final"])
def test_pipeline_gradcheck(loss_state, record_property):
    cfg = default_config()
    cfg = replace(cfg, adapter=replace(cfg.adapter, shadow_lm_loss_state=loss_state))
    start = time.perf_counter()
    report = gradcheck_pipeline(cfg, seed=0)
    elapsed = time.perf_counter() - start
    names = {n for n, _, _ in report}
    assert len(report) == len(names)
    worst = max(report, key=lambda r: r[1])
    record_property("detail", f"{loss_state}: {len(report)} tensors, max {worst[1]:.1e} at {worst[0]}, {elapsed:.1f}s")
    assert worst[1] < 1e-4
    assert elapsed < 60.0


@crit(2, "full-pipeline gradient check, max rel-err < 1e-4")
def test_gradcheck_covers_every_trainable_tensor():
    from shadowpeft.runner import tiny_gradcheck_config

    cfg = tiny_gradcheck_config(default_config())
    model = ShadowPEFTModel.build(cfg.base, cfg.shadow, cfg.adapter, seed=0)
    expected = {n for n, _ in model.trainable_named()}
    reached = set()
    for state in ("initial", "final"):
        c = replace(default_config(), adapter=replace(default_config().adapter, shadow_lm_loss_state=state))
        rep = gradcheck_pipeline(c, seed=0)
        assert {n for n, _, _ in rep} == expected
        reached |= {n for n, _, g in rep if g > 0}
    # every tensor has a live gradient under at least one loss state
    assert reached == expected


# 3

def _lm_batch(rng, V, B=4, T=12):
    tg = rng.integers(0, V, size=(B, T))
    tg[:, : T // 2] = -100
    return Batch(rng.integers(0, V, size=(B, T)), tg)


@crit(3, "loss decomposition: total == base_ce + 0.05 * shadow_ce to 1e-12")
def test_loss_decomposition_lm():
    cfg = default_config()
    model = build_model(cfg)
    randomize_adapters(model, 1)
    rng = np.random.default_rng(1)
    for step in range(5):
        _, rep = batch_loss(model, _lm_batch(rng, cfg.base.vocab_size), "lm", LAMBDA, True, step)
        assert abs(rep.total - (rep.base_ce + LAMBDA * rep.shadow_ce)) <= 1e-12


@crit(3, "loss decomposition: total == base_ce + 0.05 * shadow_ce to 1e-12")
def test_loss_decomposition_cls():
    cfg = default_config("parity_cls")
    model = build_model(cfg)
    randomize_adapters(model, 2)
    data = make_task(replace(cfg.task, train_size=64, eval_size=8), 0).train
    for step in range(5):
        b = data.batch(slice(8 * step, 8 * step + 8))
        _, rep = batch_loss(model, b, "cls", LAMBDA, True, step)
        assert abs(rep.total - (rep.base_ce + LAMBDA * rep.shadow_ce)) <= 1e-12


# 4

@crit(4, "gate convexity over 1e4 random triples, exact")
def test_gate_convexity_random_triples(record_property):
    rng = np.random.default_rng(4)
    n, d = 10_000, 32
    scales = 10.0 ** rng.uniform(-3, 3, size=(n, 1))
    s_prev = rng.normal(size=(n, d)) * scales
    t = rng.normal(size=(n, d)) * scales
    gate_in = rng.normal(size=(n, d)) * 10.0 ** rng.uniform(-2, 2, size=(n, 1))
    g = sigmoid(Tensor(gate_in))
    out = gated_update(Tensor(s_prev), Tensor(t), g).data
    lo, hi = np.minimum(s_prev, t), np.maximum(s_prev, t)
    inside = (out >= lo) & (out <= hi)
    record_property("detail", f"{inside.sum()}/{inside.size} elements inside")
    assert inside.all()


@crit(4, "gate convexity over 1e4 random triples, exact")
def test_gate_convexity_through_update_module():
    rng = np.random.default_rng(44)
    up = Update(4, 32, 16, 0.0, stream(0, "u"), std=1.0)
    s_prev = Tensor(rng.normal(size=(10_000, 1, 32)) * 3)
    h = Tensor(rng.normal(size=(10_000, 1, 32)) * 3)
    out = up.step(ShadowState(s_prev, 0), h, 1).s.data
    t = up.transform(up.normalize(h, 1), 1).data
    assert np.all(out >= np.minimum(s_prev.data, t)) and np.all(out <= np.maximum(s_prev.data, t))


# 5

@crit(5, "frozen-base checksum unchanged by 500 training steps")
def test_frozen_base_invariance(record_property):
    cfg = default_config()
    task = make_task(cfg.task, 0)
    model = build_model(cfg)
    before = base_checksum(model)
    hist = train(model, task, replace(cfg.train, steps=500, eval_interval=10_000), seed=0)
    assert len(hist.steps) == 500
    assert hist.steps[-1].total < hist.steps[0].total
    record_property("detail", f"sha256 {before[:12]}")
    assert base_checksum(model) == before


# 6

@crit(6, "detached logits invariant to base decoder layers; base-layer calls 0")
def test_detached_isolation():
    cfg = default_config()
    model = build_model(cfg)
    randomize_adapters(model, 6)
    rng = np.random.default_rng(6)
    x = rng.integers(0, cfg.base.vocab_size, size=(4, 20))
    trace = ForwardTrace()
    ref = model.detached_forward(x, trace=trace).data.copy()
    attached = model.predict_logits(x).data.copy()
    assert trace.base_layer_calls == 0
    for trial in range(3):
        for layer in model.base.layers:
            for _, w in layer.named_parameters():
                w.data[...] = rng.normal(size=w.shape) * 10.0 ** trial
        trace = ForwardTrace()
        assert np.array_equal(model.detached_forward(x, trace=trace).data, ref)
        assert trace.base_layer_calls == 0
    # control: the same perturbation does reach the attached path
    assert not np.allclose(model.predict_logits(x).data, attached)


# 7

@crit(7, "parameter accounting matches closed forms; LoRA budget gap <= 10%")
@pytest.mark.parametrize("seed", range(5))
def test_param_accounting(seed):
    r = np.random.default_rng(100 + seed)
    h = int(r.choice([1, 2, 4]))
    L, d = int(r.integers(2, 7)), 8 * h * int(r.integers(1, 3))
    base = BaseConfig(vocab_size=int(r.integers(4, 30)), d_model=d, n_layers=L, n_heads=h,
                      d_ff=int(r.integers(8, 64)))
    shadow = ShadowConfig(n_layers=1, d_model=int(r.choice([8, d])), n_heads=2, d_ff=16)
    adapter = AdapterConfig(rank=int(r.integers(1, min(d, 9))), gate_hidden=int(r.integers(0, 12)))
    model = ShadowPEFTModel.build(base, shadow, adapter, seed=seed)
    groups = param_groups(model)
    r_, hg = adapter.rank, adapter.gate_width(d)
    assert groups["injection"] == (L - 1) * 2 * d * r_
    assert groups["update"] == (L - 1) * (4 * d * hg + 2 * d)


@crit(7, "parameter accounting matches closed forms; LoRA budget gap <= 10%")
def test_lora_budget_gap(record_property):
    cfg = default_config()
    _, info = resolve_lora(cfg)
    record_property("detail", f"shadow {info['shadow_count']} vs lora {info['lora_count']} "
                              f"(rank {info['lora_rank']}), gap {100 * info['gap']:.2f}%")
    assert abs(info["gap"]) <= 0.10


# 8

@crit(8, "pinv init: residual == complement norm, beats 1000 random, self-alignment P == I")
def test_pinv_init(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(8)
    worst_gap = 0.0
    for V, dt, ds in [(64, 32, 16), (64, 16, 32), (40, 24, 24), (16, 8, 4)]:
        w_lm = rng.normal(size=(V, dt))
        w_ref = rng.normal(size=(V, ds))
        assert np.linalg.matrix_rank(w_lm) == dt
        init = pinv_init_projection(w_lm, w_ref)
        worst_gap = max(worst_gap, abs(init.residual - projection_complement_norm(w_lm, w_ref)))
        for k in range(1000):
            if k % 2:
                q = rng.normal(size=init.P.shape) * rng.uniform(0.1, 2.0)
            else:
                q = init.P + rng.normal(size=init.P.shape) * 10.0 ** rng.uniform(-3, 0)
            assert np.linalg.norm(w_lm @ q - w_ref) > init.residual
        self_P = pinv_init_projection(w_lm, w_lm).P
        assert np.max(np.abs(self_P - np.eye(dt))) < 1e-8
    elapsed = time.perf_counter() - start
    record_property("detail", f"max |residual - complement| {worst_gap:.1e}, {elapsed:.2f}s")
    assert worst_gap < 1e-8
    assert elapsed < 10.0


# 9

@crit(9, "desk-scale learning: copy_lm and parity_cls eval accuracy > 0.95")
@pytest.mark.slow
@pytest.mark.parametrize("task", ["copy_lm", "parity_cls"])
def test_desk_scale_learning(task, record_property):
    cfg = default_config(task)
    assert cfg.train.steps <= 2000
    start = time.perf_counter()
    res = run_training(cfg)
    elapsed = time.perf_counter() - start
    acc = res.history.final_eval_acc
    record_property("detail", f"{task}: base {res.base_acc:.3f} -> {acc:.3f} after {cfg.train.steps} steps, "
                              f"{elapsed:.0f}s")
    assert acc > 0.95
    assert elapsed < 300.0


# 10

@crit(10, "update ablation: disabled update keeps s == s0; enabled >= disabled on copy_lm, 3 seeds")
def test_disabled_update_freezes_state():
    cfg = default_config()
    cfg = replace(cfg, adapter=replace(cfg.adapter, update_enabled=False))
    model = build_model(cfg)
    randomize_adapters(model, 10)
    x = np.random.default_rng(10).integers(0, cfg.base.vocab_size, size=(3, 16))
    for training in (False, True):
        _, s0, s_final, trace = model.run_attached(x, training=training, keep_states=True)
        assert len(trace.states) == cfg.base.n_layers
        for s in trace.states:
            assert np.array_equal(s.data, s0.data)
        assert np.array_equal(s_final.data, s0.data)


ABLATION_STEPS = 500


@crit(10, "update ablation: disabled update keeps s == s0; enabled >= disabled on copy_lm, 3 seeds")
@pytest.mark.slow
def test_update_ablation_direction(record_property):
    # the frozen base is random-init so the adapters carry the whole task
    accs = {}
    for seed in range(3):
        for enabled in (True, False):
            cfg = default_config()
            cfg = replace(cfg, seed=seed, adapter=replace(cfg.adapter, update_enabled=enabled),
                          train=replace(cfg.train, base_pretrain_steps=0, steps=ABLATION_STEPS,
                                        eval_interval=ABLATION_STEPS))
            accs[seed, enabled] = run_training(cfg).history.final_eval_acc
    record_property("detail", ", ".join(f"seed {s}: {accs[s, True]:.3f} vs {accs[s, False]:.3f}" for s in range(3)))
    for seed in range(3):
        assert accs[seed, True] >= accs[seed, False]


# 11

def _cross_scale_setup(seed):
    corpus = make_task(TaskConfig(name="copy_lm", vocab_size=64, seq_len=16, train_size=2048, eval_size=256), seed)
    base = Backbone(BaseConfig(vocab_size=64, max_seq=16), stream(seed, "base-init"))
    pretrain_base(base, corpus, 200, seed=seed)
    ref = ReferenceShadowLM(ShadowConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, mode="explicit"), base,
                            stream(seed, "ref-init"))
    pretrain_reference(ref, corpus, 100, seed=seed)
    return corpus, base, ref


@crit(11, "cross-scale start: pinv-init CE < random-init CE, 5/5 seeds")
@pytest.mark.slow
def test_pinv_vs_random_start(record_property):
    rows = []
    for seed in range(5):
        corpus, base, ref = _cross_scale_setup(seed)
        ce = {init: detached_ce(attach_explicit_shadow(base, ref, AdapterConfig(), init, seed), corpus.eval)
              for init in ("pinv", "random")}
        rows.append(ce)
    record_property("detail", ", ".join(f"{r['pinv']:.2f} vs {r['random']:.2f}" for r in rows))
    assert all(r["pinv"] < r["random"] for r in rows)


# 12

@crit(12, "determinism and checkpoint round-trip, bit-exact")
def test_metrics_determinism(tmp_path):
    cfg = default_config()
    cfg = replace(cfg, seed=12, train=replace(cfg.train, steps=20, eval_interval=5, base_pretrain_steps=10),
                  task=replace(cfg.task, train_size=256, eval_size=64))
    for name in ("a", "b"):
        run_training(cfg, tmp_path / name)
    a, b = (tmp_path / n / "metrics.jsonl" for n in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 4
    other = replace(cfg, seed=13)
    run_training(other, tmp_path / "c")
    assert (tmp_path / "c" / "metrics.jsonl").read_bytes() != a.read_bytes()


@crit(12, "determinism and checkpoint round-trip, bit-exact")
@pytest.mark.parametrize("f32", [False, True])
def test_checkpoint_round_trip(tmp_path, f32):
    cfg = default_config()
    cfg = replace(cfg, train=replace(cfg.train, f32=f32))
    model = build_model(cfg)
    randomize_adapters(model, 12)
    path = tmp_path / "ck.bin"
    checkpoint.save(path, model.named_parameters())
    fresh = build_model(replace(cfg, seed=99))
    checkpoint.load_file_into(fresh, path)
    for (n1, t1), (n2, t2) in zip(model.named_parameters(), fresh.named_parameters()):
        assert n1 == n2 and t1.data.dtype == t2.data.dtype
        assert t1.data.tobytes() == t2.data.tobytes() and t1.requires_grad == t2.requires_grad
    x = np.arange(12).reshape(2, 6) % cfg.base.vocab_size
    assert np.array_equal(model.predict_logits(x).data, fresh.predict_logits(x).data)
    assert np.array_equal(model.predict_logits(x, mode="detached").data,
                          fresh.predict_logits(x, mode="detached").data)
