"""Kernel dispatch: compiled extension when available, numpy otherwise.

Set ``SHADOWPEFT_PURE_PYTHON=1`` before import to force the numpy path.
``BACKEND`` names the implementation in use.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("SHADOWPEFT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"


def _c(a):
    return np.ascontiguousarray(a)


def layer_norm_fwd(x2d, gamma, beta, eps):
    return _impl.layer_norm_fwd(_c(x2d), _c(gamma), _c(beta), float(eps))


def layer_norm_bwd(gy, xhat, rstd, gamma):
    return _impl.layer_norm_bwd(_c(gy), _c(xhat), _c(rstd), _c(gamma))


def causal_softmax_fwd(s3d):
    return _impl.causal_softmax_fwd(_c(s3d))


def softmax_rows_fwd(x2d):
    return _impl.softmax_rows_fwd(_c(x2d))


def softmax_bwd(p, g):
    return _impl.softmax_bwd(p, g)


def cross_entropy_fwd(logits2d, targets, ignore_index):
    return _impl.cross_entropy_fwd(_c(logits2d), np.asarray(targets, dtype=np.int64), ignore_index)


# Elementwise activations stay on numpy: its vectorized exp beats a scalar
# compiled loop (see benchmarks/bench_kernels.py).
sigmoid_fwd = _kernels_py.sigmoid_fwd
silu_fwd = _kernels_py.silu_fwd
silu_bwd = _kernels_py.silu_bwd


def use_backend(name):
    """Swap the active implementation (tests and benchmarks only)."""
    global _impl, BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels

        _impl = _kernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
