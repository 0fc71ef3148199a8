"""Wall-clock scaling of dense and streaming prior reads along a doubling T ladder."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .fem_read import ltl_read, mean_read
from .priors import (
    GlaParams,
    aft_stream_read,
    causal_mask,
    decay_stream_read,
    gla_stream_read,
    softmax_rows,
    ssm_stream_read,
)

STREAM_BAND = (1.6, 2.6)
DENSE_BAND = (3.2, 5.2)
BENCH_FAMILIES = ("softmax", "gla", "decay", "aft", "ssm")
DEFAULT_LADDER = (1024, 2048, 4096)


@dataclass
class BenchRow:
    family: str
    path: str
    lse: bool
    T: int
    seconds: float
    ratio: float | None
    band_lo: float
    band_hi: float
    in_band: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def _runner(family: str, T: int, d: int, m: int, lse: bool, rng):
    v = rng.normal(size=(T, d))
    beta = np.full(d, 1.5) if lse else None
    if family == "softmax":
        q = rng.normal(size=(T, m))
        k = rng.normal(size=(T, m))
        mask = causal_mask(T)

        def run():
            w = softmax_rows(q @ k.T / np.sqrt(m), mask)
            return ltl_read(w, v, beta, 1.0) if lse else mean_read(w, v)

        return run
    if family == "gla":
        params = GlaParams(rng.uniform(0.1, 1.0, (T, m)), rng.uniform(0.1, 1.0, (T, m)), -rng.uniform(0, 0.1, T))
        return lambda: gla_stream_read(params, v, beta)
    if family == "decay":
        g = -rng.uniform(0, 0.1, T)
        return lambda: decay_stream_read(g, v, beta)
    if family == "aft":
        k = rng.normal(size=T)
        return lambda: aft_stream_read(k, v, beta)
    if family == "ssm":
        h = 0.9 ** np.arange(32)
        return lambda: ssm_stream_read(h, v, beta)
    raise ValueError(f"unknown family {family!r}")


def time_interleaved(fns, repeats: int, budget: float = 1.0) -> np.ndarray:
    """Round-robin timings, shape (rounds, len(fns)).

    Consecutive entries of a round are measured moments apart, so their ratio
    is insensitive to slow drifts in machine speed that would bias per-point
    minima taken at different times.
    """
    rounds = []
    spent = 0.0
    while len(rounds) < repeats or spent < budget:
        row = []
        for fn in fns:
            t0 = time.perf_counter()
            fn()
            row.append(time.perf_counter() - t0)
        spent += sum(row)
        rounds.append(row)
    return np.asarray(rounds)


def run_bench(families=BENCH_FAMILIES, ladder=DEFAULT_LADDER, d: int = 8, m: int = 16, repeats: int = 7, seed: int = 0, lse_modes=(False, True), budget: float = 1.0):
    """Per-point best time plus the median over rounds of each successive doubling ratio."""
    ladder = sorted(int(t) for t in ladder)
    if len(ladder) < 3 or any(b != 2 * a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("T ladder needs at least 3 doubling points")
    rows = []
    for family in families:
        path = "dense" if family == "softmax" else "streaming"
        lo, hi = DENSE_BAND if path == "dense" else STREAM_BAND
        for lse in lse_modes:
            fns = [_runner(family, T, d, m, lse, np.random.default_rng([seed, T])) for T in ladder]
            for fn in fns:
                fn()  # warm caches and allocator
            times = time_interleaved(fns, repeats, budget)
            ratios = np.median(times[:, 1:] / times[:, :-1], axis=0)
            for j, T in enumerate(ladder):
                ratio = None if j == 0 else float(ratios[j - 1])
                ok = None if ratio is None else bool(lo <= ratio <= hi)
                rows.append(BenchRow(family, path, lse, T, float(times[:, j].min()), ratio, lo, hi, ok))
    return rows
