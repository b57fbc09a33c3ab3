"""Shadow injection: low-rank filtered base-shadow discrepancy added back to the base stream."""
from __future__ import annotations

import numpy as np

from .module import Module, normal
from .numerics import Tensor, add, dropout, matmul, scale, sub
from .numerics.tensor import ShapeError


def compute_delta(h_prev: Tensor, s_prev: Tensor) -> Tensor:
    if h_prev.shape != s_prev.shape:
        raise ShapeError(f"compute_delta: base {h_prev.shape} vs shadow {s_prev.shape}")
    return sub(h_prev, s_prev)


def inject(h_prev: Tensor, delta_tilde: Tensor, alpha: float) -> Tensor:
    if h_prev.shape != delta_tilde.shape:
        raise ShapeError(f"inject: {h_prev.shape} vs {delta_tilde.shape}")
    if not alpha > 0:
        raise ValueError(f"injection strength alpha must be > 0, got {alpha}")
    return add(h_prev, scale(delta_tilde, alpha))


class Injection(Module):
    """Per-layer ``(W_down, W_up)`` for layers 1..L-1. Layer 0 has no slot.

    ``W_up`` starts at zero, so the correction is exactly zero until trained.
    """

    def __init__(self, n_layers: int, d: int, rank: int, alpha: float, p_drop: float, std: float,
                 rng: np.random.Generator, dtype=np.float64):
        if not 1 <= rank < d:
            raise ValueError(f"injection rank must satisfy 1 <= r < d (r={rank}, d={d})")
        self.n_layers = n_layers
        self.rank = rank
        self.alpha = alpha
        self.p_drop = p_drop
        self.down = {l: normal(rng, (d, rank), std, dtype) for l in range(1, n_layers)}
        self.up = {l: Tensor(np.zeros((rank, d), dtype=dtype)) for l in range(1, n_layers)}
        self.calls = 0

    def named_parameters(self, prefix: str = "inject."):
        for l in range(1, self.n_layers):
            yield f"{prefix}L{l}.down", self.down[l]
            yield f"{prefix}L{l}.up", self.up[l]

    def _check(self, layer: int) -> None:
        if not 1 <= layer < self.n_layers:
            raise IndexError(f"injection layer {layer} outside [1, {self.n_layers - 1}]")

    def bottleneck(self, delta: Tensor, layer: int, training: bool = False, rng=None) -> Tensor:
        self._check(layer)
        z = matmul(delta, self.down[layer])
        z = dropout(z, self.p_drop, rng("inject", layer) if training else None, training)
        return matmul(z, self.up[layer])

    def __call__(self, h_prev: Tensor, s_prev: Tensor, layer: int, training: bool = False, rng=None) -> Tensor:
        self.calls += 1
        return inject(h_prev, self.bottleneck(compute_delta(h_prev, s_prev), layer, training, rng), self.alpha)
