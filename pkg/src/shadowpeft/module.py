"""Named-parameter containers."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .numerics import Tensor


class Module:
    """Yields its tensors under dotted names.

    Tensor attributes map to their attribute name; nested modules and lists
    of modules extend the prefix. Subclasses override
    :meth:`named_parameters` when they need a different naming scheme.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, Tensor):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            if not flag:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def normal(rng: np.random.Generator, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype))


def checksum(named) -> str:
    """SHA-256 over names, shapes, dtypes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(str(t.dtype).encode())
        h.update(t.data.tobytes())
    return h.hexdigest()
