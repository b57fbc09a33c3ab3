"""Joint losses, parameter accounting, the optimizer and the training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backbone import Backbone
from .config import AdapterConfig, BaseConfig, ShadowConfig, TrainConfig
from .lora import LoraModel
from .module import checksum
from .numerics import IGNORE_INDEX, Tape, Tensor, add, cross_entropy, reshape, scale, stream
from .pipeline import ShadowPEFTModel, pool
from .tasks import Batch, SyntheticTask, TaskData


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class LossReport:
    total: float
    base_ce: float
    shadow_ce: float
    step: int = 0
    trainable_param_count: int = 0


def _lm_ce(logits: Tensor, targets) -> Tensor:
    V = logits.shape[-1]
    return cross_entropy(reshape(logits, (-1, V)), np.asarray(targets).reshape(-1), IGNORE_INDEX)


def _compose(base_ce: Tensor, shadow_ce: Tensor, lam: float) -> tuple[Tensor, LossReport]:
    total = add(base_ce, scale(shadow_ce, lam))
    return total, LossReport(total.item(), base_ce.item(), shadow_ce.item())


def joint_lm_loss(base_logits: Tensor, shadow_logits: Tensor, targets, lam: float = 0.05) -> tuple[Tensor, LossReport]:
    """Base next-token CE plus ``lam`` times shadow CE, over the same target positions."""
    if lam < 0:
        raise ValueError("shadow loss weight must be >= 0")
    return _compose(_lm_ce(base_logits, targets), _lm_ce(shadow_logits, targets), lam)


def joint_cls_loss(base_logits: Tensor, shadow_logits: Tensor, labels, lam: float = 0.05) -> tuple[Tensor, LossReport]:
    """Classification analogue; both logits are already pooled (B, C)."""
    if lam < 0:
        raise ValueError("shadow loss weight must be >= 0")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    C = base_logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label outside [0, {C})")
    return _compose(cross_entropy(base_logits, labels), cross_entropy(shadow_logits, labels), lam)


# parameter accounting

def trainable_params(model) -> tuple[list[tuple[str, Tensor]], int]:
    named = [(n, t) for n, t in model.named_parameters() if t.requires_grad and not n.startswith("base.")]
    return named, sum(t.size for _, t in named)


def param_groups(model) -> dict[str, int]:
    """Enumerated trainable counts per group."""
    groups = {"injection": 0, "update": 0, "shadow_backbone": 0, "projection": 0, "heads": 0, "lora": 0}
    for name, t in trainable_params(model)[0]:
        if name.startswith("inject."):
            groups["injection"] += t.size
        elif name.startswith("update."):
            groups["update"] += t.size
        elif name.startswith("lora."):
            groups["lora"] += t.size
        elif name.startswith("shadow.layers."):
            groups["shadow_backbone"] += t.size
        elif name in ("shadow.w_in", "shadow.w_proj"):
            groups["projection"] += t.size
        else:
            groups["heads"] += t.size
    groups["total"] = sum(groups.values())
    return groups


def param_formula(base: BaseConfig, shadow: ShadowConfig, adapter: AdapterConfig, tied_head: bool = False) -> dict[str, int]:
    """Closed-form trainable counts, matching :func:`param_groups` key for key."""
    L, d, V, C = base.n_layers, base.d_model, base.vocab_size, base.n_classes
    ds, ffs = shadow.d_model, shadow.d_ff
    r, hg = adapter.rank, adapter.gate_width(d)
    update = 0
    if adapter.update_enabled:
        update = (L - 1) * (4 * d * hg + (2 * d if adapter.update_layernorm else 0))
    out = {
        "injection": (L - 1) * 2 * d * r,
        "update": update,
        "shadow_backbone": shadow.n_layers * (4 * ds * ds + 2 * ds * ffs + 4 * ds),
        "projection": (d * ds if ds != d else 0) + (d * ds if ds != d or shadow.mode == "explicit" else 0),
        "heads": (0 if tied_head else d * V) + d * C,
        "lora": 0,
    }
    out["total"] = sum(out.values())
    return out


# optimizer

class AdamW:
    """Adaptive moments with decoupled weight decay over a fixed list of named tensors."""

    def __init__(self, named: list[tuple[str, Tensor]], lr: float = 3e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.named = [(n, t) for n, t in named if t.requires_grad]
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.beta1, self.beta2 = betas
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.named}
        self.v = {n: np.zeros_like(t.data) for n, t in self.named}

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.isfinite(p.grad).all():
                bad = int((~np.isfinite(p.grad)).sum())
                raise NonFiniteGradient(f"gradient of {name} has {bad} non-finite entries")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None


# losses for a batch, per model type

def batch_loss(model, batch: Batch, kind: str, lam: float, training: bool, step: int) -> tuple[Tensor, LossReport]:
    task = "cls" if kind == "cls" else "lm"
    if isinstance(model, ShadowPEFTModel):
        res = model.attached_forward(batch.inputs, training, step, task, batch.pad_mask)
        if kind == "cls":
            return joint_cls_loss(res.base_logits, res.shadow_logits, batch.labels, lam)
        return joint_lm_loss(res.base_logits, res.shadow_logits, batch.targets, lam)
    if isinstance(model, LoraModel):
        logits = model.attached_forward(batch.inputs, training, step, task, batch.pad_mask).base_logits
        ce = cross_entropy(logits, batch.labels) if kind == "cls" else _lm_ce(logits, batch.targets)
        return ce, LossReport(ce.item(), ce.item(), 0.0)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def base_only_loss(base: Backbone, batch: Batch, kind: str) -> Tensor:
    h = base.hidden(batch.inputs)
    if kind == "cls":
        return cross_entropy(base.cls_logits(pool(h, batch.pad_mask, "last")), batch.labels)
    return _lm_ce(base.lm_logits(h), batch.targets)


# evaluation

def accuracy(model, data: TaskData, mode: str = "attached", batch_size: int = 256) -> float:
    """Next-token accuracy on supervised positions (LM) or label accuracy (cls)."""
    correct = total = 0
    task = "cls" if data.kind == "cls" else "lm"
    for start in range(0, len(data), batch_size):
        b = data.batch(slice(start, start + batch_size))
        if isinstance(model, Backbone):
            h = model.hidden(b.inputs)
            logits = model.cls_logits(pool(h, b.pad_mask, "last")) if task == "cls" else model.lm_logits(h)
        else:
            logits = model.predict_logits(b.inputs, task, b.pad_mask, mode)
        pred = logits.data.argmax(axis=-1)
        if task == "cls":
            correct += int((pred == b.labels).sum())
            total += b.labels.size
        else:
            keep = b.targets != IGNORE_INDEX
            correct += int((pred[keep] == b.targets[keep]).sum())
            total += int(keep.sum())
    return correct / total


# training loops

def _sample(data: TaskData, batch_size: int, seed: int, step: int, site: str) -> Batch:
    idx = stream(seed, site, step).integers(0, len(data), size=batch_size)
    return data.batch(idx)


def pretrain_base(base: Backbone, task: SyntheticTask, steps: int, lr: float = 3e-3, batch_size: int = 32,
                  seed: int = 0) -> list[float]:
    """Base-only supervised phase; the base ends frozen."""
    base.set_trainable(True)
    opt = AdamW(list(base.named_parameters()), lr=lr)
    losses = []
    try:
        for step in range(steps):
            batch = _sample(task.train, batch_size, seed, step, "base-batch")
            opt.zero_grad()
            with Tape() as tape:
                loss = base_only_loss(base, batch, task.kind)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            if not math.isfinite(losses[-1]) or losses[-1] > 1e4:
                raise TrainingDiverged(f"base pretraining diverged at step {step}: loss {losses[-1]}")
    finally:
        base.freeze()
    return losses


@dataclass
class TrainHistory:
    steps: list[LossReport] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    @property
    def final_eval_acc(self) -> float:
        return self.evals[-1]["eval_acc"] if self.evals else float("nan")


def train(model, task: SyntheticTask, cfg: TrainConfig, seed: int = 0,
          on_record: Optional[Callable[[dict], None]] = None, eval_mode: str = "attached") -> TrainHistory:
    """Adapter training with the base frozen. Deterministic given ``seed``."""
    named, count = trainable_params(model)
    if any(n.startswith("base.") and t.requires_grad for n, t in model.named_parameters()):
        raise RuntimeError("base parameters must be frozen before adapter training")
    opt = AdamW(named, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    hist = TrainHistory()
    for step in range(cfg.steps):
        batch = _sample(task.train, cfg.batch_size, seed, step, "peft-batch")
        opt.zero_grad()
        with Tape() as tape:
            loss, report = batch_loss(model, batch, task.kind, cfg.shadow_loss_weight, True, step)
        if not math.isfinite(report.total) or report.total > 1e4:
            raise TrainingDiverged(f"loss {report.total} at step {step}")
        tape.backward(loss)
        opt.step()
        report.step, report.trainable_param_count = step, count
        hist.steps.append(report)
        last = step == cfg.steps - 1
        if (step + 1) % cfg.eval_interval == 0 or last:
            rec = {"step": step + 1, "total": report.total, "base_ce": report.base_ce,
                   "shadow_ce": report.shadow_ce, "eval_acc": accuracy(model, task.eval, eval_mode)}
            hist.evals.append(rec)
            if on_record is not None:
                on_record(rec)
    return hist


def base_checksum(model) -> str:
    base = model if isinstance(model, Backbone) else model.base
    return checksum(base.named_parameters())

