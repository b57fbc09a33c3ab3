"""Central-difference gradient verification against the tape."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(f: Callable[[], Tensor], p: Tensor, h: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is non-finite at a perturbed point of {p.name or 'param'}[{i}]")
        g[i] = (fp - fm) / (2.0 * h)
    return g.reshape(p.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[tuple[str, float]]:
    """Per-parameter maximum relative error, in parameter order."""
    ana = analytic_grads(f, params)
    report = []
    for k, (p, a) in enumerate(zip(params, ana)):
        n = numeric_grad(f, p, h)
        err = float(rel_error(a, n).max()) if a.size else 0.0
        report.append((p.name or f"param{k}", err))
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Maximum relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by reference; they are
    perturbed in place and restored.
    """
    report = grad_check_report(f, params, h)
    return max((e for _, e in report), default=0.0)
