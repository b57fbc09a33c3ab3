"""Shadow update: gated interpolation of the shadow state toward a transform of the base output."""
from __future__ import annotations

import numpy as np

from .module import Module, normal
from .numerics import Tensor, dropout, gated_update, layer_norm, matmul, sigmoid, silu
from .shadow import ShadowState


class SequencingError(RuntimeError):
    pass


class Update(Module):
    """Per-layer transform ``T`` and gate ``G`` MLPs (bias-free) with a shared input LayerNorm.

    Disabled, it owns no parameters and leaves the state untouched.
    """

    def __init__(self, n_layers: int, d: int, gate_hidden: int, p_drop: float, rng: np.random.Generator,
                 std: float = 0.02, use_layernorm: bool = True, enabled: bool = True, eps: float = 1e-5,
                 dtype=np.float64):
        self.n_layers = n_layers
        self.enabled = enabled
        self.use_layernorm = use_layernorm
        self.p_drop = p_drop
        self.eps = eps
        self.t1, self.t2, self.g1, self.g2, self.ln_gamma, self.ln_beta = {}, {}, {}, {}, {}, {}
        if enabled:
            for l in range(1, n_layers):
                self.t1[l] = normal(rng, (d, gate_hidden), std, dtype)
                self.t2[l] = normal(rng, (gate_hidden, d), std, dtype)
                self.g1[l] = normal(rng, (d, gate_hidden), std, dtype)
                self.g2[l] = normal(rng, (gate_hidden, d), std, dtype)
                if use_layernorm:
                    self.ln_gamma[l] = Tensor(np.ones(d, dtype=dtype))
                    self.ln_beta[l] = Tensor(np.zeros(d, dtype=dtype))
        self.calls = 0

    def named_parameters(self, prefix: str = "update."):
        for l in range(1, self.n_layers):
            for key in ("t1", "t2", "g1", "g2", "ln_gamma", "ln_beta"):
                table = getattr(self, key)
                if l in table:
                    yield f"{prefix}L{l}.{key}", table[l]

    def _check(self, layer: int) -> None:
        if not 1 <= layer < self.n_layers:
            raise IndexError(f"update layer {layer} outside [1, {self.n_layers - 1}]")
        if not self.enabled:
            raise RuntimeError("update module is disabled")

    def normalize(self, h_out: Tensor, layer: int) -> Tensor:
        self._check(layer)
        if not self.use_layernorm:
            return h_out
        return layer_norm(h_out, self.ln_gamma[layer], self.ln_beta[layer], self.eps)

    def transform(self, z: Tensor, layer: int, training: bool = False, rng=None) -> Tensor:
        self._check(layer)
        a = silu(matmul(z, self.t1[layer]))
        a = dropout(a, self.p_drop, rng("update", layer) if training else None, training)
        return matmul(a, self.t2[layer])

    def gate(self, z: Tensor, layer: int) -> Tensor:
        self._check(layer)
        return sigmoid(matmul(silu(matmul(z, self.g1[layer])), self.g2[layer]))

    def step(self, state: ShadowState, h_out: Tensor, layer: int, training: bool = False, rng=None) -> ShadowState:
        if layer != state.cursor + 1:
            raise SequencingError(f"update for layer {layer} received a state at cursor {state.cursor}")
        self.calls += 1
        if not self.enabled:
            return ShadowState(state.s, layer)
        z = self.normalize(h_out, layer)
        t = self.transform(z, layer, training, rng)
        g = self.gate(z, layer)
        return ShadowState(gated_update(state.s, t, g), layer)
