"""Differentiable primitives.

Each op computes its forward with numpy (or a fused kernel), then hands a
closure computing input gradients to :func:`_emit`. Closures return one
entry per input, ``None`` where no gradient flows.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, _check_broadcast, _emit, _unbroadcast

IGNORE_INDEX = -100


class EmptyLossError(ValueError):
    pass


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit(ad * bd, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; ``b`` may be a plain 2-D weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(out, (a, b), back, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def sigmoid(x: Tensor) -> Tensor:
    y = kernels.sigmoid_fwd(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    y, s = kernels.silu_fwd(xd)
    return _emit(y, (x,), lambda g: (kernels.silu_bwd(g, xd, s),), "silu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last axis {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    shape = x.shape
    y, xhat, rstd = kernels.layer_norm_fwd(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def back(g):
        dx, dg, db = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _emit(y.reshape(shape), (x, gamma, beta), back, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shape = x.shape
    p = kernels.softmax_rows_fwd(x.data.reshape(-1, shape[-1])).reshape(shape)
    return _emit(p, (x,), lambda g: (kernels.softmax_bwd(p, g),), "softmax")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over keys with position i attending only to j <= i.

    ``scores`` is (..., T, T); masked probabilities are exactly zero.
    """
    shape = scores.shape
    if shape[-1] != shape[-2]:
        raise ShapeError(f"causal_softmax expects square trailing axes, got {shape}")
    p = kernels.causal_softmax_fwd(scores.data.reshape(-1, shape[-2], shape[-1])).reshape(shape)
    return _emit(p, (scores,), lambda g: (kernels.softmax_bwd(p, g),), "causal_softmax")


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {t.shape[0]} targets")
    keep = t != ignore_index
    if not keep.any():
        raise EmptyLossError("cross_entropy: every target is ignored, loss is empty")
    bad = keep & ((t < 0) | (t >= v))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(t[bad][0])} out of range [0, {v})")
    total, count, probs = kernels.cross_entropy_fwd(logits.data, t, ignore_index)
    rows = np.nonzero(keep)[0]

    def back(g):
        d = np.zeros_like(probs)
        d[rows] = probs[rows]
        d[rows, t[rows]] -= 1.0
        return (d * (float(np.reshape(g, -1)[0]) / count),)

    return _emit(np.asarray(total / count, dtype=logits.dtype), (logits,), back, "cross_entropy")


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradient scatters back into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding: index out of range [0, {v})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(table.data[idx], (table,), back, "embedding")


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; the identity (same object) in eval mode or when p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def gated_update(s_prev: Tensor, t: Tensor, g: Tensor) -> Tensor:
    """Elementwise ``(1 - g) * s_prev + g * t``.

    Rounding can land a convex combination one ulp outside its endpoints,
    so the result is clamped to ``[min(s_prev, t), max(s_prev, t)]``.
    """
    if not (s_prev.shape == t.shape == g.shape):
        raise ShapeError(f"gated_update: shapes differ {s_prev.shape}, {t.shape}, {g.shape}")
    sd, td, gd = s_prev.data, t.data, g.data
    out = (1.0 - gd) * sd + gd * td
    out = np.clip(out, np.minimum(sd, td), np.maximum(sd, td))

    def back(gr):
        return gr * (1.0 - gd), gr * gd, gr * (td - sd)

    return _emit(out, (s_prev, t, g), back, "gated_update")


def take_rows(h: Tensor, positions) -> Tensor:
    """Select ``h[b, positions[b], :]`` for each batch row."""
    pos = np.asarray(positions, dtype=np.int64)
    b = np.arange(h.shape[0])
    shape = h.shape

    def back(g):
        gh = np.zeros(shape, dtype=g.dtype)
        gh[b, pos] = g
        return (gh,)

    return _emit(h.data[b, pos], (h,), back, "take_rows")


def masked_mean(h: Tensor, mask) -> Tensor:
    """Mean over axis 1 of (B, T, d) restricted to positions where ``mask`` is true."""
    m = np.asarray(mask, dtype=h.dtype)[..., None]
    cnt = m.sum(axis=1)
    return _emit((h.data * m).sum(axis=1) / cnt, (h,), lambda g: ((g / cnt)[:, None, :] * m,), "masked_mean")
