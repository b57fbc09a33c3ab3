"""Compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--f32]

Times each dispatched kernel on training-sized inputs, the numpy-only
activations for reference, and one full ShadowPEFT training step on the
default copy-task config, under both backends.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from shadowpeft.config import default_config
from shadowpeft.numerics import Tape, kernels
from shadowpeft.numerics import _kernels_py as py
from shadowpeft.numerics.alloc import tune_allocator
from shadowpeft.pipeline import ShadowPEFTModel
from shadowpeft.tasks import make_task
from shadowpeft.training import batch_loss


def _inputs(dtype):
    rng = np.random.default_rng(0)
    B, T, d, H, V = 32, 31, 32, 4, 16
    x = rng.normal(size=(B * T, d)).astype(dtype)
    g = np.ones(d, dtype=dtype)
    b = np.zeros(d, dtype=dtype)
    y, xhat, rstd = py.layer_norm_fwd(x, g, b, 1e-5)
    scores = rng.normal(size=(B * H, T, T)).astype(dtype)
    p = py.causal_softmax_fwd(scores)
    logits = rng.normal(size=(B * T, V)).astype(dtype)
    targets = rng.integers(0, V, size=B * T)
    return {
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(x, g, b, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(x, xhat, rstd, g),
        "causal_softmax_fwd": lambda: kernels.causal_softmax_fwd(scores),
        "softmax_bwd": lambda: kernels.softmax_bwd(p, scores),
        "cross_entropy_fwd": lambda: kernels.cross_entropy_fwd(logits, targets, -100),
        "silu_fwd (numpy only)": lambda: kernels.silu_fwd(x),
        "sigmoid_fwd (numpy only)": lambda: kernels.sigmoid_fwd(x),
    }


def _train_step(dtype):
    cfg = default_config("copy_lm")
    model = ShadowPEFTModel.build(cfg.base, cfg.shadow, cfg.adapter, seed=0, dtype=dtype)
    batch = make_task(cfg.task, 0).train.batch(slice(0, cfg.train.batch_size))

    def step():
        with Tape() as tape:
            loss, _ = batch_loss(model, batch, "lm", 0.05, True, 0)
        tape.backward(loss)

    return step


def best_us(fn, repeat: int) -> float:
    fn()
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--f32", action="store_true")
    args = ap.parse_args(argv)
    tune_allocator()
    dtype = np.float32 if args.f32 else np.float64
    try:
        kernels.use_backend("cython")
        backends = ("cython", "python")
    except ImportError:
        print("compiled extension not built; timing the numpy fallback only")
        backends = ("python",)
    rows = {}
    for backend in backends:
        kernels.use_backend(backend)
        cases = _inputs(dtype)
        cases["train step (fwd+bwd)"] = _train_step(dtype)
        for name, fn in cases.items():
            rows.setdefault(name, {})[backend] = best_us(fn, args.repeat)
    print(f"{'kernel':<28}" + "".join(f"{b + ' us':>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for name, t in rows.items():
        line = f"{name:<28}" + "".join(f"{t[b]:>14.1f}" for b in backends)
        if len(backends) == 2:
            line += f"{t['python'] / t['cython']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
