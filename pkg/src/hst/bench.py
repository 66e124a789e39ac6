"""Windowed vs global self-attention: analytic cost and a timed kernel."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .model import HstConfig, count_params

MODES = ("windowed", "global")


def attention_score_macs(p: int, m: int, c: int, mode: str = "windowed") -> int:
    """MACs of Q K^T over a P x P token grid with C channels (heads split C, so the count is head-free)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "windowed":
        if p % m:
            raise ValueError(f"grid {p} is not divisible by window {m}")
        return p * p * m * m * c
    return p ** 4 * c


def attention_macs(p: int, m: int, c: int, mode: str = "windowed") -> int:
    """Scores plus the attention-weighted value sum."""
    return 2 * attention_score_macs(p, m, c, mode)


def mac_ratio(p: int, m: int, c: int) -> Fraction:
    return Fraction(attention_score_macs(p, m, c, "windowed"), attention_score_macs(p, m, c, "global"))


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, m: int | None) -> np.ndarray:
    """Softmax attention on (P, P, C) maps; ``m=None`` attends over the whole grid."""
    p, _, c = q.shape
    m = p if m is None else m
    nw, n, d = (p // m) ** 2, m * m, c // heads

    def split(t):
        t = t.reshape(p // m, m, p // m, m, heads, d).transpose(0, 2, 4, 1, 3, 5)
        return t.reshape(nw, heads, n, d)

    qs, ks, vs = split(q), split(k), split(v)
    s = qs @ ks.transpose(0, 1, 3, 2)
    s *= 1.0 / np.sqrt(d)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = s @ vs
    out = out.reshape(p // m, p // m, heads, m, m, d).transpose(0, 3, 1, 4, 2, 5)
    return out.reshape(p, p, c)


def peak_buffer_bytes(p: int, m: int, c: int, heads: int, mode: str, itemsize: int = 4) -> int:
    """Largest live intermediate: the score tensor, or the (P, P, C) maps if those are bigger."""
    ctx = m * m if mode == "windowed" else p * p
    return max(p * p * heads * ctx, p * p * c) * itemsize


def time_kernel(p: int, m: int, c: int, heads: int, mode: str, repeats: int = 3, seed: int = 0) -> float:
    """Best-of-``repeats`` wall time in seconds."""
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((p, p, c)).astype(np.float32) for _ in range(3))
    win = m if mode == "windowed" else None
    attention_kernel(q, k, v, heads, win)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        attention_kernel(q, k, v, heads, win)
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class BenchRow:
    p: int
    m: int
    variant: str
    mode: str
    channels: int
    heads: int
    score_macs: int
    attention_macs: int
    seconds: float
    params: int
    peak_bytes: int


def run_bench(grid: Iterable[tuple[int, int]], variants: Iterable[str] = ("base",),
              modes: Iterable[str] = MODES, repeats: int = 3, max_global_p: int = 56) -> list[BenchRow]:
    """Benchmark stage-1 widths of each variant over (P, M) pairs.

    Global attention above ``max_global_p`` is reported analytically with NaN time.
    """
    rows = []
    for variant in variants:
        cfg = HstConfig.from_variant(variant)
        c, heads, n_params = cfg.dims[0], cfg.heads[0], count_params(cfg)
        for p, m in grid:
            for mode in modes:
                timed = mode == "windowed" or p <= max_global_p
                secs = time_kernel(p, m, c, heads, mode, repeats) if timed else float("nan")
                rows.append(BenchRow(p, m, variant, mode, c, heads, attention_score_macs(p, m, c, mode),
                                     attention_macs(p, m, c, mode), secs, n_params,
                                     peak_buffer_bytes(p, m, c, heads, mode)))
    return rows


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(rows[0])) if rows else [])
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
