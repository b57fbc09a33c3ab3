"""Pure numpy implementations of the fused kernels.

Selected automatically when the compiled ``_kernels`` extension is missing,
or forced with ``SHADOWPEFT_PURE_PYTHON=1``. Signatures and return values
match the Cython module exactly.
"""
import numpy as np


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(gy, xhat, rstd, gamma):
    d = xhat.shape[1]
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    gx = gy * gamma
    # dx = rstd * (gx - mean(gx) - xhat * mean(gx * xhat))
    m1 = gx.sum(axis=1, keepdims=True) / d
    m2 = (gx * xhat).sum(axis=1, keepdims=True) / d
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def causal_softmax_fwd(s):
    """Row softmax over (N, T, T) scores, masking keys j > i to exactly 0."""
    T = s.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    z = np.where(mask, -np.inf, s)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(p, g):
    """Backward of a row softmax along the last axis; works for any rank."""
    dot = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - dot)


def cross_entropy_fwd(logits, targets, ignore_index):
    """Returns (sum of per-row losses, number of counted rows, row softmax)."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    keep = targets != ignore_index
    rows = np.nonzero(keep)[0]
    lse = np.log(se[rows, 0])
    total = float((lse - z[rows, targets[rows]]).sum())
    return total, int(rows.size), probs


def sigmoid_fwd(x):
    # clipping keeps exp finite (f64 and f32) while saturating to 0/1 exactly
    lim = 700.0 if x.dtype == np.float64 else 80.0
    z = np.negative(x)
    np.clip(z, -lim, lim, out=z)
    np.exp(z, out=z)
    z += 1.0
    return np.reciprocal(z, out=z)


def silu_fwd(x):
    s = sigmoid_fwd(x)
    return x * s, s


def silu_bwd(g, x, s):
    return g * (s * (1.0 + x * (1.0 - s)))
