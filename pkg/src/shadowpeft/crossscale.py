"""Explicit shadows of a different width, bridged to the base head by a projection.

Heads follow the math orientation here: ``W_lm`` is (V, d_t) and
``W_lm_ref`` is (V, d_s), so a shadow hidden ``z`` of width d_s is scored as
``W_lm P z``. The row-major modules store heads transposed, which makes the
shadow's ``w_proj`` equal to ``P.T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .backbone import Backbone, DecoderLayer
from .config import AdapterConfig, ConfigError, ShadowConfig
from .module import Module, normal
from .numerics import Tape, Tensor, matmul, pinv, stream
from .numerics.tensor import ShapeError
from .pipeline import ShadowPEFTModel
from .shadow import ShadowNetwork
from .tasks import SyntheticTask
from .training import AdamW, TrainingDiverged, _lm_ce, _sample


class VocabMismatch(ValueError):
    pass


@dataclass
class ProjectionInit:
    P: np.ndarray  # (d_t, d_s)
    norm_lm: float
    norm_ref: float
    residual: float


def pinv_init_projection(w_lm, w_lm_ref, rcond: float = 1e-12) -> ProjectionInit:
    """Frobenius-optimal ``P`` with ``W_lm P ~= W_lm_ref``."""
    w_lm = np.asarray(getattr(w_lm, "data", w_lm), dtype=np.float64)
    w_ref = np.asarray(getattr(w_lm_ref, "data", w_lm_ref), dtype=np.float64)
    if w_lm.ndim != 2 or w_ref.ndim != 2:
        raise ShapeError(f"heads must be 2-D, got {w_lm.shape} and {w_ref.shape}")
    if w_lm.shape[0] != w_ref.shape[0]:
        raise VocabMismatch(f"vocabularies differ: {w_lm.shape[0]} vs {w_ref.shape[0]}")
    P = pinv(w_lm, rcond).data @ w_ref
    residual = float(np.linalg.norm(w_lm @ P - w_ref))
    return ProjectionInit(P, float(np.linalg.norm(w_lm)), float(np.linalg.norm(w_ref)), residual)


def projection_complement_norm(w_lm, w_lm_ref) -> float:
    """``||(I - W W^+) W_ref||_F``, the smallest residual any ``P`` can reach."""
    w_lm = np.asarray(w_lm, dtype=np.float64)
    proj = w_lm @ pinv(w_lm).data
    return float(np.linalg.norm(w_lm_ref - proj @ w_lm_ref))


class ReferenceShadowLM(Module):
    """A shadow language model with its own head, as if pretrained on its own.

    It reads the frozen base embeddings (no embedding table of its own), maps
    them to width d_s and scores with ``head`` of shape (d_s, V).
    """

    def __init__(self, cfg: ShadowConfig, base: Backbone, rng):
        errs = cfg.problems()
        if errs:
            raise ConfigError(errs)
        self.cfg = cfg
        self._base = base
        d, ds, dtype = base.cfg.d_model, cfg.d_model, base.dtype
        self.w_in = normal(rng, (d, ds), 1.0 / math.sqrt(d), dtype) if ds != d else None
        self.layers = [DecoderLayer(ds, cfg.n_heads, cfg.d_ff, rng, cfg.init_std, dtype, base.cfg.ln_eps)
                       for _ in range(cfg.n_layers)]
        self.head = normal(rng, (ds, base.cfg.vocab_size), 1.0 / math.sqrt(ds), dtype)

    @property
    def base(self) -> Backbone:
        return self._base

    def named_parameters(self, prefix: str = "ref."):
        yield from super().named_parameters(prefix)

    def hidden(self, tokens) -> Tensor:
        z = self.base.embed(tokens)
        if self.w_in is not None:
            z = matmul(z, self.w_in)
        for layer in self.layers:
            z = layer(z)
        return z

    def logits(self, tokens) -> Tensor:
        return matmul(self.hidden(tokens), self.head)


def attach_explicit_shadow(base: Backbone, ref: ReferenceShadowLM, adapter: AdapterConfig, init: str = "pinv",
                           seed: int = 0) -> ShadowPEFTModel:
    """Compose ``ref``'s layers with ``base`` through a projection onto the base head.

    The composed shadow head is the frozen base head, so detached logits are
    ``W_lm P z``. ``ref.head`` is kept on the shadow as ``_ref_head`` for
    evaluation only.
    """
    if ref.head.shape[1] != base.cfg.vocab_size:
        raise VocabMismatch(f"shadow vocabulary {ref.head.shape[1]} differs from base {base.cfg.vocab_size}")
    if ref.base is not base:
        raise ValueError("reference shadow must read the same base embeddings")
    if init not in ("pinv", "random"):
        raise ValueError(f"init must be 'pinv' or 'random' (got {init!r})")
    cfg = ShadowConfig(n_layers=ref.cfg.n_layers, d_model=ref.cfg.d_model, n_heads=ref.cfg.n_heads,
                       d_ff=ref.cfg.d_ff, mode="explicit", init_std=ref.cfg.init_std)
    shadow = ShadowNetwork(cfg, base, stream(seed, "explicit-init"), tie_lm_head=True)
    if ref.w_in is not None:
        shadow.w_in.data[...] = ref.w_in.data
    for dst, src in zip(shadow.layers, ref.layers):
        for (_, a), (_, b) in zip(dst.named_parameters(), src.named_parameters()):
            a.data[...] = b.data
    if init == "pinv":
        shadow.w_proj.data[...] = pinv_init_projection(base.lm_head.data.T, ref.head.data.T).P.T
    shadow._ref_head = Tensor(ref.head.data.copy())
    return ShadowPEFTModel.build(base.cfg, cfg, adapter, seed=seed, base=base, shadow=shadow)


def detached_ce(model: ShadowPEFTModel, data, batch_size: int = 256) -> float:
    """Mean detached next-token CE over a task split, weighted by supervised positions."""
    total = count = 0.0
    for start in range(0, len(data), batch_size):
        b = data.batch(slice(start, start + batch_size))
        n = float((b.targets != -100).sum())
        total += _lm_ce(model.detached_forward(b.inputs, "lm"), b.targets).item() * n
        count += n
    return total / count


def _fit(named, loss_fn, data, steps: int, lr: float, batch_size: int, seed: int, site: str) -> list[float]:
    opt = AdamW(named, lr=lr)
    losses = []
    for step in range(steps):
        batch = _sample(data, batch_size, seed, step, site)
        opt.zero_grad()
        with Tape() as tape:
            loss = loss_fn(batch)
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
        if not math.isfinite(losses[-1]) or losses[-1] > 1e4:
            raise TrainingDiverged(f"{site} diverged at step {step}: loss {losses[-1]}")
    return losses


def pretrain_reference(ref: ReferenceShadowLM, corpus: SyntheticTask, steps: int, lr: float = 3e-3,
                       batch_size: int = 32, seed: int = 0) -> list[float]:
    """Native pretraining of the reference shadow with its own head."""
    ref.set_trainable(True)
    return _fit(list(ref.named_parameters()), lambda b: _lm_ce(ref.logits(b.inputs), b.targets),
                corpus.train, steps, lr, batch_size, seed, "ref-batch")


def shadow_pretrain(model: ShadowPEFTModel, corpus: SyntheticTask, steps: int, lr: float = 3e-3,
                    batch_size: int = 32, seed: int = 0) -> list[float]:
    """Continue training the shadow layers and ``P`` through the frozen base head."""
    if model.shadow.w_proj is None:
        raise ValueError("shadow has no projection to train")
    named = [(n, t) for n, t in model.shadow.named_parameters() if t.requires_grad]
    return _fit(named, lambda b: _lm_ce(model.detached_forward(b.inputs, "lm"), b.targets),
                corpus.train, steps, lr, batch_size, seed, "shadow-pretrain-batch")


def head_kl(w_lm, P, w_lm_ref, states) -> float:
    """Mean ``KL(softmax(W_ref s) || softmax(W_lm P s))`` over rows of ``states`` (n, d_s)."""
    def log_softmax(x):
        x = x - x.max(axis=1, keepdims=True)
        return x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    ref = log_softmax(states @ np.asarray(w_lm_ref).T)
    got = log_softmax(states @ (np.asarray(w_lm) @ P).T)
    return float((np.exp(ref) * (ref - got)).sum(axis=1).mean())


def random_projection(d_t: int, d_s: int, seed: int = 0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """A random ``P`` with the same scale as the default bridge init."""
    rng = rng or stream(seed, "random-projection")
    return rng.normal(0.0, 1.0 / math.sqrt(d_s), size=(d_t, d_s))
