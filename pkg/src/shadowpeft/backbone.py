"""Frozen base transformer: embeddings, pre-norm causal decoder layers, heads."""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .config import BaseConfig, ConfigError
from .module import Module, normal
from .numerics import (
    Tensor,
    causal_softmax,
    embedding,
    layer_norm,
    matmul,
    reshape,
    scale,
    silu,
    transpose,
)
from .numerics.tensor import ShapeError

# hook(site, layer_index, x, weight) -> x @ weight (+ adapter contribution)
ProjectionHook = Callable[[str, int, Tensor, Tensor], Tensor]


class DecoderLayer(Module):
    """Pre-norm block: ``h + Attn(LN(h))`` then ``+ MLP(LN(.))``. Bias-free."""

    def __init__(self, d: int, n_heads: int, d_ff: int, rng, std: float, dtype, eps: float = 1e-5):
        self.n_heads = n_heads
        self.eps = eps
        self.ln1_g = Tensor(np.ones(d, dtype=dtype))
        self.ln1_b = Tensor(np.zeros(d, dtype=dtype))
        self.wq = normal(rng, (d, d), std, dtype)
        self.wk = normal(rng, (d, d), std, dtype)
        self.wv = normal(rng, (d, d), std, dtype)
        self.wo = normal(rng, (d, d), std, dtype)
        self.ln2_g = Tensor(np.ones(d, dtype=dtype))
        self.ln2_b = Tensor(np.zeros(d, dtype=dtype))
        self.w1 = normal(rng, (d, d_ff), std, dtype)
        self.w2 = normal(rng, (d_ff, d), std, dtype)

    def attention(self, x: Tensor, index: int = 0, hook: Optional[ProjectionHook] = None) -> Tensor:
        B, T, d = x.shape
        nh = self.n_heads
        dh = d // nh
        proj = hook or (lambda site, i, a, w: matmul(a, w))
        q = proj("q", index, x, self.wq)
        k = matmul(x, self.wk)
        v = proj("v", index, x, self.wv)

        def heads(t):
            return transpose(reshape(t, (B, T, nh, dh)), (0, 2, 1, 3))

        scores = scale(matmul(heads(q), transpose(heads(k), (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = matmul(causal_softmax(scores), heads(v))
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        return matmul(ctx, self.wo)

    def __call__(self, h: Tensor, index: int = 0, hook: Optional[ProjectionHook] = None) -> Tensor:
        if h.ndim != 3 or h.shape[-1] != self.wq.shape[0]:
            raise ShapeError(f"decoder layer expects (B, T, {self.wq.shape[0]}), got {h.shape}")
        h = h + self.attention(layer_norm(h, self.ln1_g, self.ln1_b, self.eps), index, hook)
        z = layer_norm(h, self.ln2_g, self.ln2_b, self.eps)
        return h + matmul(silu(matmul(z, self.w1)), self.w2)


class Backbone(Module):
    """The base model. Every tensor is non-trainable once :meth:`freeze` runs."""

    def __init__(self, cfg: BaseConfig, rng: np.random.Generator, dtype=np.float64):
        errs = cfg.problems()
        if errs:
            raise ConfigError(errs)
        self.cfg = cfg
        d, std = cfg.d_model, cfg.init_std
        self.tok_emb = normal(rng, (cfg.vocab_size, d), std, dtype)
        self.pos_emb = normal(rng, (cfg.max_seq, d), std, dtype)
        self.layers = [DecoderLayer(d, cfg.n_heads, cfg.d_ff, rng, std, dtype, cfg.ln_eps) for _ in range(cfg.n_layers)]
        self.ln_f_g = Tensor(np.ones(d, dtype=dtype))
        self.ln_f_b = Tensor(np.zeros(d, dtype=dtype))
        self.lm_head = normal(rng, (d, cfg.vocab_size), std, dtype)
        self.cls_head = normal(rng, (d, cfg.n_classes), std, dtype) if cfg.n_classes else None
        self.embed_calls = 0
        self.layer_calls = 0

    def named_parameters(self, prefix: str = "base."):
        yield from super().named_parameters(prefix)

    def freeze(self) -> None:
        self.set_trainable(False)

    @property
    def dtype(self):
        return self.tok_emb.dtype

    def embed(self, tokens) -> Tensor:
        """Token rows plus learned absolute position rows: the shared input ``E``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (B, T), got {tokens.shape}")
        T = tokens.shape[1]
        if T > self.cfg.max_seq:
            raise ShapeError(f"sequence length {T} exceeds max_seq {self.cfg.max_seq}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {self.cfg.vocab_size})")
        self.embed_calls += 1
        return embedding(self.tok_emb, tokens) + embedding(self.pos_emb, np.arange(T))

    def layer_forward(self, h: Tensor, index: int, hook: Optional[ProjectionHook] = None) -> Tensor:
        if not 0 <= index < len(self.layers):
            raise IndexError(f"layer index {index} outside [0, {len(self.layers)})")
        self.layer_calls += 1
        return self.layers[index](h, index, hook)

    def final_hidden(self, h: Tensor) -> Tensor:
        return layer_norm(h, self.ln_f_g, self.ln_f_b, self.cfg.ln_eps)

    def lm_logits(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.lm_head.shape[0]:
            raise ShapeError(f"lm_logits: hidden width {h.shape[-1]} != {self.lm_head.shape[0]}")
        return matmul(h, self.lm_head)

    def cls_logits(self, pooled: Tensor) -> Tensor:
        if self.cls_head is None:
            raise ValueError("this base model has no classifier head (n_classes == 0)")
        if pooled.ndim != 2 or pooled.shape[-1] != self.cls_head.shape[0]:
            raise ShapeError(f"cls_logits expects (B, {self.cls_head.shape[0]}), got {pooled.shape}")
        return matmul(pooled, self.cls_head)

    def hidden(self, tokens, hook: Optional[ProjectionHook] = None) -> Tensor:
        """Adapter-free forward up to ``h_base`` (final-norm output)."""
        h = self.embed(tokens)
        for i in range(len(self.layers)):
            h = self.layer_forward(h, i, hook)
        return self.final_hidden(h)

    def forward(self, tokens) -> Tensor:
        return self.lm_logits(self.hidden(tokens))
