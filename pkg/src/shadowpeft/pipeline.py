"""The per-layer inject / encode / update loop and the two inference modes.

Layers are zero-based: layer 0 runs on the raw embeddings without
injection, then layers 1..L-1 each do injection, base encoding and a
shadow update. The last update therefore yields the state indexed L-1 here,
which is the final shadow state of the method (L-1 refinement steps).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .backbone import Backbone
from .config import AdapterConfig, BaseConfig, ConfigError, ShadowConfig
from .injection import Injection
from .module import Module
from .numerics import DropoutRNG, Tensor, masked_mean, take_rows
from .shadow import ShadowNetwork
from .update import SequencingError, Update


class PoolingError(ValueError):
    pass


@dataclass
class ForwardTrace:
    embed_calls: int = 0
    base_layer_calls: int = 0
    shadow_layer_calls: int = 0
    injection_calls: int = 0
    update_calls: int = 0
    h_out: list = field(default_factory=list)
    states: list = field(default_factory=list)


class AttachedResult(NamedTuple):
    base_logits: Tensor
    shadow_logits: Tensor
    trace: ForwardTrace


def pool(h: Tensor, pad_mask=None, how: str = "last") -> Tensor:
    """Reduce (B, T, d) to (B, d).

    ``pad_mask[b, t]`` is true at padding. ``last`` picks each row's last
    non-pad position; ``mean`` averages the non-pad positions.
    """
    B, T, _ = h.shape
    if pad_mask is None:
        pad_mask = np.zeros((B, T), dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != (B, T):
        raise PoolingError(f"pad_mask shape {pad_mask.shape} does not match {(B, T)}")
    valid = ~pad_mask
    empty = ~valid.any(axis=1)
    if empty.any():
        raise PoolingError(f"row {int(np.argmax(empty))} is entirely padding")
    if how == "last":
        last = T - 1 - np.argmax(valid[:, ::-1], axis=1)
        return take_rows(h, last)
    if how == "mean":
        return masked_mean(h, valid)
    raise PoolingError(f"unknown pooling {how!r}")


class ShadowPEFTModel(Module):
    """Frozen :class:`Backbone` plus shadow network, injection and update modules."""

    def __init__(self, base: Backbone, shadow: ShadowNetwork, injection: Injection, update: Update,
                 adapter: AdapterConfig, seed: int = 0):
        self.base = base
        self.shadow = shadow
        self.injection = injection
        self.update = update
        self.adapter = adapter
        self.seed = seed

    @classmethod
    def build(cls, base_cfg: BaseConfig, shadow_cfg: ShadowConfig, adapter: AdapterConfig, seed: int = 0,
              dtype=np.float64, base: Optional[Backbone] = None,
              shadow: Optional[ShadowNetwork] = None) -> "ShadowPEFTModel":
        errs = base_cfg.problems() + shadow_cfg.problems(base_cfg) + adapter.problems(base_cfg)
        if errs:
            raise ConfigError(errs)
        from .numerics import stream

        if base is None:
            base = Backbone(base_cfg, stream(seed, "base-init"), dtype)
        base.freeze()
        d, L = base_cfg.d_model, base_cfg.n_layers
        if shadow is None:
            shadow = ShadowNetwork(shadow_cfg, base, stream(seed, "shadow-init"))
        shadow.set_trainable(True)
        injection = Injection(L, d, adapter.rank, adapter.alpha, adapter.inject_dropout, adapter.init_std,
                              stream(seed, "inject-init"), base.dtype)
        injection.set_trainable(True)
        update = Update(L, d, adapter.gate_width(d), adapter.update_dropout, stream(seed, "update-init"),
                        std=0.02, use_layernorm=adapter.update_layernorm, enabled=adapter.update_enabled,
                        eps=base_cfg.ln_eps, dtype=base.dtype)
        update.set_trainable(True)
        return cls(base, shadow, injection, update, adapter, seed)

    def named_parameters(self, prefix: str = ""):
        yield from self.base.named_parameters()
        yield from self.shadow.named_parameters()
        yield from self.injection.named_parameters()
        yield from self.update.named_parameters()

    def trainable_named(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    # forwards

    def _counters(self):
        return (self.base.embed_calls, self.base.layer_calls, self.shadow.layer_calls,
                self.injection.calls, self.update.calls)

    def _fill_trace(self, trace: ForwardTrace, before) -> None:
        after = self._counters()
        (trace.embed_calls, trace.base_layer_calls, trace.shadow_layer_calls,
         trace.injection_calls, trace.update_calls) = (a - b for a, b in zip(after, before))

    def run_attached(self, tokens, training: bool = False, step: int = 0, keep_states: bool = False):
        """Returns ``(h_base, s_initial, s_final, trace)``."""
        before = self._counters()
        trace = ForwardTrace()
        rng = DropoutRNG(self.seed, step)
        E = self.base.embed(tokens)
        state = self.shadow.init_state(E)
        s_initial = state.s
        h = self.base.layer_forward(E, 0)
        if keep_states:
            trace.h_out.append(h)
            trace.states.append(state.s)
        for layer in range(1, self.base.cfg.n_layers):
            if state.cursor != layer - 1:
                raise SequencingError(f"injection at layer {layer} found shadow cursor {state.cursor}")
            h = self.injection(h, state.s, layer, training, rng)
            h = self.base.layer_forward(h, layer)
            state = self.update.step(state, h, layer, training, rng)
            if keep_states:
                trace.h_out.append(h)
                trace.states.append(state.s)
        h_base = self.base.final_hidden(h)
        self._fill_trace(trace, before)
        return h_base, s_initial, state.s, trace

    def attached_forward(self, tokens, training: bool = False, step: int = 0, task: str = "lm",
                         pad_mask=None) -> AttachedResult:
        """Base logits and the shadow logits used by the auxiliary loss."""
        h_base, s0, s_final, trace = self.run_attached(tokens, training, step)
        if task == "lm":
            s = s0 if self.adapter.shadow_lm_loss_state == "initial" else s_final
            return AttachedResult(self.base.lm_logits(h_base), self.shadow.lm_logits(s), trace)
        if task == "cls":
            how = self.adapter.pooling
            base_logits = self.base.cls_logits(pool(h_base, pad_mask, how))
            shadow_logits = self.shadow.cls_logits(pool(s_final, pad_mask, how))
            return AttachedResult(base_logits, shadow_logits, trace)
        raise ValueError(f"unknown task kind {task!r}")

    def detached_forward(self, tokens, task: str = "lm", pad_mask=None, trace: Optional[ForwardTrace] = None) -> Tensor:
        """Shadow-only prediction: shared embeddings, shadow network, shadow head."""
        before = self._counters()
        s0 = self.shadow.init_state(self.base.embed(tokens)).s
        if task == "lm":
            out = self.shadow.lm_logits(s0)
        elif task == "cls":
            out = self.shadow.cls_logits(pool(s0, pad_mask, self.adapter.pooling))
        else:
            raise ValueError(f"unknown task kind {task!r}")
        if trace is not None:
            self._fill_trace(trace, before)
        return out

    def predict_logits(self, tokens, task: str = "lm", pad_mask=None, mode: str = "attached") -> Tensor:
        if mode == "detached":
            return self.detached_forward(tokens, task, pad_mask)
        return self.attached_forward(tokens, False, 0, task, pad_mask).base_logits
