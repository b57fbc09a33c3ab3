"""Pseudo-inverse through a thin SVD."""
import numpy as np

from .tensor import Tensor


class NumericalError(ArithmeticError):
    pass


def pinv(m, rcond: float = 1e-12) -> Tensor:
    """Moore-Penrose pseudo-inverse of an (m, n) matrix.

    Singular values at or below ``rcond * sigma_max`` are treated as zero.
    Accepts a Tensor or array; returns an (n, m) Tensor with the same dtype.
    """
    a = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"pinv expects a matrix, got shape {a.shape}")
    if rcond < 0:
        raise ValueError("rcond must be non-negative")
    if not np.isfinite(a).all():
        raise NumericalError("pinv: input contains non-finite entries")
    if a.size == 0:
        return Tensor(np.zeros(a.shape[::-1], dtype=a.dtype))
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"pinv: SVD did not converge ({exc})") from exc
    cutoff = rcond * s[0] if s.size else 0.0
    keep = s > cutoff
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return Tensor((vt.T * inv) @ u.T, dtype=a.dtype)
