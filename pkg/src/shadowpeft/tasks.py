"""Synthetic desk-scale tasks.

``copy_lm``
    A random first half followed by an exact copy; loss and accuracy count
    only the copied half.
``modadd_lm``
    ``a + b = c`` with ``c = (a + b) mod p``; tokens ``p`` and ``p + 1``
    stand for ``+`` and ``=``. Only ``c`` is supervised.
``parity_cls``
    Sequences of length ``T - PAD_SPAN`` to ``T``, right-padded with
    token 0. Token 1 is the marked token; its count is uniform on
    ``0..MAX_MARKS``, so the parity label is balanced and the count carries
    a signal a pooled linear head can pick up.

Train and eval examples come from separate seeded streams, so regenerating
with the same seed is bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import TaskConfig
from .numerics import IGNORE_INDEX, stream

PAD = 0
MARK = 1
MAX_MARKS = 3
PAD_SPAN = 2


@dataclass
class Batch:
    inputs: np.ndarray
    targets: Optional[np.ndarray] = None  # (B, T) next-token targets for LM tasks
    labels: Optional[np.ndarray] = None  # (B,) class labels
    pad_mask: Optional[np.ndarray] = None  # true at padding


@dataclass
class TaskData:
    kind: str
    inputs: np.ndarray
    targets: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    pad_mask: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(
            self.inputs[idx],
            None if self.targets is None else self.targets[idx],
            None if self.labels is None else self.labels[idx],
            self.pad_mask[idx],
        )


@dataclass
class SyntheticTask:
    cfg: TaskConfig
    seed: int
    train: TaskData
    eval: TaskData

    @property
    def kind(self) -> str:
        return self.train.kind


def _copy_lm(cfg: TaskConfig, n: int, rng) -> TaskData:
    half = cfg.seq_len // 2
    first = rng.integers(0, cfg.vocab_size, size=(n, half))
    seq = np.concatenate([first, first], axis=1)
    inputs, targets = seq[:, :-1].copy(), seq[:, 1:].copy()
    targets[:, : half - 1] = IGNORE_INDEX
    return TaskData("lm", inputs, targets, None, np.zeros(inputs.shape, dtype=bool))


def _modadd_lm(cfg: TaskConfig, n: int, rng) -> TaskData:
    p = cfg.modulus
    a = rng.integers(0, p, size=n)
    b = rng.integers(0, p, size=n)
    seq = np.stack([a, np.full(n, p), b, np.full(n, p + 1), (a + b) % p], axis=1)
    inputs, targets = seq[:, :-1].copy(), seq[:, 1:].copy()
    targets[:, :-1] = IGNORE_INDEX
    return TaskData("lm", inputs, targets, None, np.zeros(inputs.shape, dtype=bool))


def _parity_cls(cfg: TaskConfig, n: int, rng) -> TaskData:
    T = cfg.seq_len
    lengths = rng.integers(max(T - PAD_SPAN, MAX_MARKS, 1), T + 1, size=n)
    counts = rng.integers(0, MAX_MARKS + 1, size=n)
    body = rng.integers(MARK + 1, cfg.vocab_size, size=(n, T))
    for i in range(n):
        body[i, rng.permutation(lengths[i])[: counts[i]]] = MARK
    pad = np.arange(T)[None, :] >= lengths[:, None]
    body[pad] = PAD
    return TaskData("cls", body, None, counts % 2, pad)


_GENERATORS = {"copy_lm": _copy_lm, "modadd_lm": _modadd_lm, "parity_cls": _parity_cls}


def make_task(cfg: TaskConfig, seed: int) -> SyntheticTask:
    errs = cfg.problems()
    if errs:
        raise ValueError("; ".join(errs))
    gen = _GENERATORS[cfg.name]
    train = gen(cfg, cfg.train_size, stream(seed, "task", cfg.name, "train"))
    held = gen(cfg, cfg.eval_size, stream(seed, "task", cfg.name, "eval"))
    return SyntheticTask(cfg, seed, train, held)

