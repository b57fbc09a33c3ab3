"""The centralized shadow network and its prediction heads.

The shadow has no embedding table: it consumes the base model's embedding
output directly. When its width differs from the base, ``w_in`` maps the
shared embeddings in and ``w_proj`` maps the shadow output back, so the
shadow state is always base-width. An explicit shadow keeps ``w_proj`` at
any width because it doubles as the cross-scale bridge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, DecoderLayer
from .config import ConfigError, ShadowConfig
from .module import Module, normal
from .numerics import Tensor, matmul
from .numerics.tensor import ShapeError


@dataclass
class ShadowState:
    """Shadow representation after ``cursor`` refinement steps."""

    s: Tensor
    cursor: int = 0


class ShadowNetwork(Module):
    def __init__(self, cfg: ShadowConfig, base: Backbone, rng: np.random.Generator, tie_lm_head: bool = False):
        errs = cfg.problems(base.cfg)
        if errs:
            raise ConfigError(errs)
        self.cfg = cfg
        bc = base.cfg
        d, ds, dtype = bc.d_model, cfg.d_model, base.dtype
        self.d_base = d
        self.w_in = normal(rng, (d, ds), 1.0 / np.sqrt(d), dtype) if ds != d else None
        self.layers = [
            DecoderLayer(ds, cfg.n_heads, cfg.d_ff, rng, cfg.init_std, dtype, bc.ln_eps) for _ in range(cfg.n_layers)
        ]
        # an explicit shadow always carries its bridge, even at equal widths
        need_proj = ds != d or cfg.mode == "explicit"
        self.w_proj = normal(rng, (ds, d), 1.0 / np.sqrt(ds), dtype) if need_proj else None
        self.head_tied = tie_lm_head
        # a tied head is the frozen base head itself and is not a shadow parameter
        self._tied_head = base.lm_head if tie_lm_head else None
        self.lm_head = None if tie_lm_head else normal(rng, (d, bc.vocab_size), cfg.init_std, dtype)
        self.cls_head = Tensor(base.cls_head.data.copy()) if base.cls_head is not None else None
        self.layer_calls = 0

    def named_parameters(self, prefix: str = "shadow."):
        yield from super().named_parameters(prefix)

    @property
    def head(self) -> Tensor:
        return self._tied_head if self.head_tied else self.lm_head

    def encode(self, x_embeds: Tensor) -> Tensor:
        """Shadow layers at shadow width, before the output projection."""
        if x_embeds.ndim != 3 or x_embeds.shape[-1] != self.d_base:
            raise ShapeError(f"shadow expects base-width embeddings (B, T, {self.d_base}), got {x_embeds.shape}")
        z = matmul(x_embeds, self.w_in) if self.w_in is not None else x_embeds
        for layer in self.layers:
            self.layer_calls += 1
            z = layer(z)
        return z

    def project(self, z: Tensor) -> Tensor:
        return matmul(z, self.w_proj) if self.w_proj is not None else z

    def init_state(self, x_embeds: Tensor) -> ShadowState:
        """``s^(0)``: shadow encoding of the shared embeddings, projected to base width."""
        return ShadowState(self.project(self.encode(x_embeds)), 0)

    def lm_logits(self, s: Tensor) -> Tensor:
        if s.shape[-1] != self.d_base:
            raise ShapeError(f"shadow lm head expects width {self.d_base}, got {s.shape[-1]}")
        return matmul(s, self.head)

    def cls_logits(self, pooled: Tensor) -> Tensor:
        if self.cls_head is None:
            raise ValueError("shadow has no classifier head (base n_classes == 0)")
        if pooled.ndim != 2 or pooled.shape[-1] != self.d_base:
            raise ShapeError(f"shadow cls head expects (B, {self.d_base}), got {pooled.shape}")
        return matmul(pooled, self.cls_head)
