"""Synthetic tasks: channel-wise argmax regression and selective copying."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

# SeedSequence spawn keys; winners get their own streams so runs that change
# only the noise level still see the same winner indices.
_TRAIN_WINNERS, _TRAIN_NOISE, _VAL_WINNERS, _VAL_NOISE = range(4)


@dataclass(frozen=True)
class ArgmaxTaskConfig:
    T: int = 128
    D: int = 512
    delta: float = 1.0
    sigma: float = 0.05
    n_train: int = 200_000
    n_val: int = 2_000
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.D < 1:
            raise ValueError("T and D must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("sample counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


class ToyBatch(NamedTuple):
    V: np.ndarray  # (B, T, D)
    a: np.ndarray  # (B, D) winner index per channel, 0-based
    y_star: np.ndarray  # (B, D) channel maxima


def _streams(seed: int, split: str):
    w, n = (_TRAIN_WINNERS, _TRAIN_NOISE) if split == "train" else (_VAL_WINNERS, _VAL_NOISE)
    root = np.random.SeedSequence(seed)
    children = root.spawn(4)
    return np.random.default_rng(children[w]), np.random.default_rng(children[n])


def make_argmax_batch(cfg: ArgmaxTaskConfig, win_rng, noise_rng, n: int, dtype=np.float64) -> ToyBatch:
    dtype = np.dtype(dtype)
    a = win_rng.integers(0, cfg.T, size=(n, cfg.D))
    # draw in the working precision directly; float32 sampling is about twice as fast
    V = noise_rng.standard_normal(size=(n, cfg.T, cfg.D), dtype=dtype)
    V *= dtype.type(cfg.sigma)
    eps = noise_rng.standard_normal(size=(n, cfg.D), dtype=dtype) * dtype.type(cfg.sigma)
    np.put_along_axis(V, a[:, None, :], (dtype.type(cfg.delta) + eps)[:, None, :], axis=1)
    return ToyBatch(V=V, a=a, y_star=V.max(axis=1))


def gen_argmax_task(
    cfg: ArgmaxTaskConfig,
    batch: int,
    split: str = "train",
    dtype=np.float64,
    epochs: int | None = 1,
) -> Iterator[ToyBatch]:
    """Stream batches of the split; nothing beyond one batch is held in memory.

    The training stream restarts from its seed after ``n_train`` samples, so
    ``epochs=None`` yields forever and repeats the same data each epoch.
    """
    if split not in ("train", "val"):
        raise ValueError("split must be 'train' or 'val'")
    total = cfg.n_train if split == "train" else cfg.n_val
    epoch = 0
    while total > 0 and (epochs is None or epoch < epochs):
        win_rng, noise_rng = _streams(cfg.seed, split)
        left = total
        while left > 0:
            n = min(batch, left)
            yield make_argmax_batch(cfg, win_rng, noise_rng, n, dtype)
            left -= n
        epoch += 1


def index_accuracy(y, V, a) -> float:
    """Fraction of channels whose nearest entry in V (ties to the smallest index) is the winner."""
    y = np.asarray(y)
    V = np.asarray(V)
    a = np.asarray(a)
    if V.ndim == 2:
        V, y, a = V[None], y[None], a[None]
    if y.shape != a.shape or V.shape[0] != y.shape[0] or V.shape[2] != y.shape[1]:
        raise ValueError("shape mismatch between y, V and a")
    pred = np.argmin((V - y[:, None, :]) ** 2, axis=1)
    return float(np.mean(pred == a))


# ----------------------------------------------------------------------------
# selective copy


class CopyItem(NamedTuple):
    tokens: np.ndarray  # (T,) ints in [0, vocab)
    marks: np.ndarray  # (T,) bool, positions to copy
    target: np.ndarray  # marked tokens in order


def gen_selective_copy(T: int, vocab: int, n: int, n_marked: int = 4, seed: int = 0) -> Iterator[CopyItem]:
    """Sequences with ``n_marked`` marked positions whose tokens must be reproduced in order."""
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    if not 1 <= n_marked <= T:
        raise ValueError("need 1 <= n_marked <= T")
    rng = np.random.default_rng(seed)
    for _ in range(n):
        tokens = rng.integers(0, vocab, size=T)
        pos = np.sort(rng.choice(T, size=n_marked, replace=False))
        marks = np.zeros(T, dtype=bool)
        marks[pos] = True
        yield CopyItem(tokens, marks, tokens[pos])


def exact_match(pred, target) -> bool:
    pred = np.asarray(pred)
    target = np.asarray(target)
    return pred.shape == target.shape and bool(np.all(pred == target))
