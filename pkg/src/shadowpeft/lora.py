"""LoRA on the query/value projections of the same frozen base, for budget-matched comparison."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .backbone import Backbone
from .config import BaseConfig, LoraConfig
from .module import Module, normal
from .numerics import DropoutRNG, Tensor, add, dropout, matmul, scale, stream
from .numerics.tensor import ShapeError
from .pipeline import ForwardTrace, pool

TARGETS = ("q", "v")


class BudgetError(ValueError):
    pass


def lora_linear(x: Tensor, w_frozen: Tensor, a: Tensor, b: Tensor, scaling: float, training: bool = False,
                rng=None, p_drop: float = 0.0) -> Tensor:
    """``x W + scaling * Dropout(x A) B``."""
    if a.shape[0] != w_frozen.shape[0] or b.shape[1] != w_frozen.shape[1] or a.shape[1] != b.shape[0]:
        raise ShapeError(f"lora shapes disagree: W {w_frozen.shape}, A {a.shape}, B {b.shape}")
    base = matmul(x, w_frozen)
    z = dropout(matmul(x, a), p_drop, rng, training)
    return add(base, scale(matmul(z, b), scaling))


def lora_param_count(base: BaseConfig, rank: int) -> int:
    """Trainable LoRA parameters for q and v adapters in every layer."""
    d = base.d_model
    return base.n_layers * len(TARGETS) * (d * rank + rank * d)


def match_budget(shadow_count: int, base: BaseConfig) -> tuple[int, int, float]:
    """Largest LoRA rank whose count does not exceed ``shadow_count``.

    Returns ``(rank, lora_count, relative_gap)`` with the gap measured
    against ``shadow_count``.
    """
    if shadow_count <= 0:
        raise BudgetError("shadow parameter count must be positive")
    per_rank = lora_param_count(base, 1)
    rank = shadow_count // per_rank
    if rank < 1:
        raise BudgetError(f"budget {shadow_count} is below the rank-1 LoRA count {per_rank}")
    count = lora_param_count(base, rank)
    return rank, count, (shadow_count - count) / shadow_count


class LoraLayer(Module):
    def __init__(self, d: int, rank: int, std: float, rng, dtype):
        for t in TARGETS:
            setattr(self, f"{t}_A", normal(rng, (d, rank), std, dtype))
            setattr(self, f"{t}_B", Tensor(np.zeros((rank, d), dtype=dtype)))


class LoraModel(Module):
    def __init__(self, base: Backbone, cfg: LoraConfig, seed: int = 0):
        base.freeze()
        self.base = base
        self.cfg = cfg
        self.seed = seed
        self.scaling = cfg.alpha / cfg.rank
        rng = stream(seed, "lora-init")
        self.layers = [LoraLayer(base.cfg.d_model, cfg.rank, cfg.init_std, rng, base.dtype)
                       for _ in range(base.cfg.n_layers)]
        for layer in self.layers:
            layer.set_trainable(True)

    def named_parameters(self, prefix: str = ""):
        yield from self.base.named_parameters()
        for i, layer in enumerate(self.layers):
            for t in TARGETS:
                yield f"lora.L{i}.{t}.A", getattr(layer, f"{t}_A")
                yield f"lora.L{i}.{t}.B", getattr(layer, f"{t}_B")

    def trainable_named(self):
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def _hook(self, training: bool, step: int):
        rng = DropoutRNG(self.seed, step)

        def hook(site, index, x, w):
            layer = self.layers[index]
            return lora_linear(x, w, getattr(layer, f"{site}_A"), getattr(layer, f"{site}_B"), self.scaling,
                               training, rng(f"lora-{site}", index) if training else None, self.cfg.dropout)

        return hook

    def forward_hidden(self, tokens, training: bool = False, step: int = 0) -> Tensor:
        return self.base.hidden(tokens, self._hook(training, step))

    def attached_forward(self, tokens, training: bool = False, step: int = 0, task: str = "lm", pad_mask=None):
        trace = ForwardTrace()
        before = (self.base.embed_calls, self.base.layer_calls)
        h = self.forward_hidden(tokens, training, step)
        trace.embed_calls = self.base.embed_calls - before[0]
        trace.base_layer_calls = self.base.layer_calls - before[1]
        if task == "lm":
            logits = self.base.lm_logits(h)
        else:
            logits = self.base.cls_logits(pool(h, pad_mask, "last"))
        return LoraResult(logits, trace)

    def predict_logits(self, tokens, task: str = "lm", pad_mask=None, mode: str = "attached") -> Tensor:
        if mode != "attached":
            raise ValueError("LoRA has no detached mode: its adapters live inside the base layers")
        return self.attached_forward(tokens, False, 0, task, pad_mask).base_logits


class LoraResult(NamedTuple):
    base_logits: Tensor
    trace: ForwardTrace
