"""End-to-end runs assembled from a :class:`RunConfig`.

The CLI is a thin shell over these functions, and the tests drive them
directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from .backbone import Backbone
from .config import BaseConfig, RunConfig, ShadowConfig
from .lora import LoraModel, lora_param_count, match_budget
from .numerics import IGNORE_INDEX, Tensor, grad_check_report, stream
from .numerics.gradcheck import analytic_grads
from .numerics.tensor import ShapeError
from .pipeline import ShadowPEFTModel
from .tasks import Batch, SyntheticTask, make_task
from .training import (
    TrainHistory,
    accuracy,
    batch_loss,
    param_formula,
    param_groups,
    pretrain_base,
    train,
)

METRIC_FIELDS = ("step", "total", "base_ce", "shadow_ce", "eval_acc")
CHECKPOINT_NAME = "checkpoint.bin"
CONFIG_NAME = "run_config.toml"
METRICS_NAME = "metrics.jsonl"


def dtype_of(cfg: RunConfig):
    return np.float32 if cfg.train.f32 else np.float64


def resolve_lora(cfg: RunConfig) -> tuple[RunConfig, dict]:
    """Fix the LoRA rank, matching the ShadowPEFT budget when asked to."""
    if not cfg.lora.match_budget:
        count = lora_param_count(cfg.base, cfg.lora.rank)
        return cfg, {"lora_rank": cfg.lora.rank, "lora_count": count}
    budget = param_formula(cfg.base, cfg.shadow, cfg.adapter)["total"]
    rank, count, gap = match_budget(budget, cfg.base)
    lora = replace(cfg.lora, rank=rank, alpha=cfg.lora.alpha * rank / cfg.lora.rank, match_budget=False)
    return replace(cfg, lora=lora), {"shadow_count": budget, "lora_rank": rank, "lora_count": count, "gap": gap}


def build_base(cfg: RunConfig) -> Backbone:
    return Backbone(cfg.base, stream(cfg.seed, "base-init"), dtype_of(cfg))


def build_model(cfg: RunConfig, base: Optional[Backbone] = None):
    """Adapter model around ``base`` (a fresh one if omitted). LoRA ranks must be resolved."""
    base = base or build_base(cfg)
    if cfg.method == "lora":
        if cfg.lora.match_budget:
            raise ValueError("resolve the LoRA budget before building")
        return LoraModel(base, cfg.lora, cfg.seed)
    return ShadowPEFTModel.build(cfg.base, cfg.shadow, cfg.adapter, seed=cfg.seed, base=base)


@dataclass
class RunResult:
    cfg: RunConfig
    task: SyntheticTask
    model: object
    history: TrainHistory
    base_acc: float
    info: dict


def run_training(cfg: RunConfig, out_dir=None, on_record: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Base pretraining (if requested), freeze, adapter training, artifacts."""
    cfg = cfg.validate()
    info = {}
    if cfg.method == "lora":
        cfg, info = resolve_lora(cfg)
    task = make_task(cfg.task, cfg.seed)
    base = build_base(cfg)
    if cfg.train.base_pretrain_steps:
        pretrain_base(base, task, cfg.train.base_pretrain_steps, cfg.train.base_lr, cfg.train.batch_size, cfg.seed)
    base.freeze()
    base_acc = accuracy(base, task.eval)
    model = build_model(cfg, base)
    records = []

    def record(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    eval_mode = cfg.inference_mode if cfg.method == "shadow" else "attached"
    history = train(model, task, cfg.train, cfg.seed, record, eval_mode)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / METRICS_NAME, records)
        checkpoint.save(out / CHECKPOINT_NAME, model.named_parameters())
        save_config(out / CONFIG_NAME, cfg)
    return RunResult(cfg, task, model, history, base_acc, info)


def write_metrics(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in METRIC_FIELDS}) + "\n")


def save_config(path, cfg: RunConfig) -> None:
    import tomli_w

    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)


def restore(cfg: RunConfig, ckpt_path):
    """Rebuild the model skeleton for ``cfg`` and fill it from a checkpoint."""
    model = build_model(cfg)
    checkpoint.load_file_into(model, ckpt_path)
    return model


# greedy decoding

def generate(model, prompt, max_new: int, mode: str = "attached") -> list[int]:
    """Greedy continuation of a single prompt."""
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("prompt must contain at least one token")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    limit = model.base.cfg.max_seq
    if len(tokens) + max_new > limit:
        raise ShapeError(f"prompt ({len(tokens)}) + max_new ({max_new}) exceeds max_seq {limit}")
    for _ in range(max_new):
        logits = model.predict_logits(np.asarray([tokens]), "lm", None, mode)
        tokens.append(int(logits.data[0, -1].argmax()))
    return tokens


# full-pipeline gradient check

TINY_BASE = BaseConfig(vocab_size=7, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_seq=6)
TINY_SHADOW = ShadowConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8)


def tiny_gradcheck_config(cfg: Optional[RunConfig] = None) -> RunConfig:
    """Shrink ``cfg`` to gradcheck size: 64-bit, dropout off, every other knob kept."""
    cfg = cfg or RunConfig()
    adapter = replace(cfg.adapter, rank=min(cfg.adapter.rank, 3), inject_dropout=0.0, update_dropout=0.0,
                      gate_hidden=min(cfg.adapter.gate_width(TINY_BASE.d_model), 6))
    shadow = replace(TINY_SHADOW, mode=cfg.shadow.mode)
    return replace(cfg, base=TINY_BASE, shadow=shadow, adapter=adapter, train=replace(cfg.train, f32=False))


def gradcheck_pipeline(cfg: Optional[RunConfig] = None, seed: int = 0, h: float = 1e-5,
                       batch: int = 2, seq: int = 5) -> list[tuple[str, float, float]]:
    """``(name, max relative error, gradient norm)`` per trainable tensor of the joint LM loss.

    Every trainable tensor, including the zero-initialized up-projections, is
    randomized first so no gradient vanishes by construction. A zero norm
    means the tensor has no path to the loss in this configuration (the
    update modules of a 2-layer base only reach the loss through the final
    state).
    """
    cfg = tiny_gradcheck_config(cfg)
    model = ShadowPEFTModel.build(cfg.base, cfg.shadow, cfg.adapter, seed=seed)
    rng = stream(seed, "gradcheck")
    named = model.trainable_named()
    for name, t in named:
        t.data += rng.normal(0.0, 0.3, size=t.shape)
        t.name = name
    V = cfg.base.vocab_size
    tokens = rng.integers(0, V, size=(batch, seq))
    targets = rng.integers(0, V, size=(batch, seq))
    targets[0, 0] = IGNORE_INDEX
    b = Batch(tokens, targets)

    def f() -> Tensor:
        return batch_loss(model, b, "lm", cfg.train.shadow_loss_weight, False, 0)[0]

    params = [t for _, t in named]
    norms = [float(np.linalg.norm(g)) for g in analytic_grads(f, params)]
    return [(n, e, g) for (n, e), g in zip(grad_check_report(f, params, h), norms)]


def params_table(cfg: RunConfig) -> list[tuple[str, int, int]]:
    """(group, enumerated, formula) rows for the configured method."""
    cfg = cfg.validate()
    if cfg.method == "lora":
        cfg, _ = resolve_lora(cfg)
        model = build_model(cfg)
        n = sum(t.size for _, t in model.trainable_named())
        f = lora_param_count(cfg.base, cfg.lora.rank)
        return [("lora", n, f), ("total", n, f)]
    model = build_model(cfg)
    enum = param_groups(model)
    formula = param_formula(cfg.base, cfg.shadow, cfg.adapter, model.shadow.head_tied)
    return [(k, enum[k], formula[k]) for k in enum if k != "lora"]

