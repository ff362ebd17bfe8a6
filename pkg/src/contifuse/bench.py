"""Cost of the full versus sampled decomposition loss on synthetic state stacks."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import torch

from contifuse.losses import (
    count_gamma_evaluations,
    decomposition_loss_full,
    decomposition_loss_sds,
    derive_seed,
    sds_sample,
)
from contifuse.model import StateStack


def synthetic_stacks(num_layers: int, num_states: int, channels: int = 16, size: int = 48, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    stacks = []
    for l in range(1, num_layers + 1):
        c, s = channels * 2 ** (l - 1), max(size // 2 ** (l - 1), 2)
        rand = lambda *shape: torch.randn(*shape, generator=gen)
        stacks.append(StateStack(rand(1, c, s, s), rand(1, num_states, c, s, s), rand(1, c, s, s), l))
    return stacks


@dataclass
class BenchRow:
    k: int
    full_evals: int
    sds_evals: int
    full_seconds: float
    sds_seconds: float


def _timed(fn, trials):
    best = float("inf")
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark_sds(
    ks: Sequence[int], trials: int = 3, num_layers: int = 3, channels: int = 16, size: int = 48, seed: int = 0
) -> list[BenchRow]:
    """Distance-evaluation counts (excluding mu) and best-of-``trials`` wall time per K."""
    rows = []
    for k in ks:
        stacks = synthetic_stacks(num_layers, k, channels, size, seed)
        sets = [sds_sample(derive_seed(seed, 0, l), k) for l in range(num_layers)]
        with torch.no_grad():
            with count_gamma_evaluations() as full:
                decomposition_loss_full(stacks)
            with count_gamma_evaluations() as sds:
                decomposition_loss_sds(stacks, sets)
            t_full = _timed(lambda: decomposition_loss_full(stacks), trials)
            t_sds = _timed(lambda: decomposition_loss_sds(stacks, sets), trials)
        rows.append(BenchRow(k, full.pairs, sds.pairs, t_full, t_sds))
    return rows


def format_rows(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'K':>4} {'full evals':>11} {'sds evals':>10} {'full ms':>9} {'sds ms':>8} {'speedup':>8}"]
    for r in rows:
        lines.append(
            f"{r.k:>4} {r.full_evals:>11} {r.sds_evals:>10} {r.full_seconds * 1e3:>9.2f} "
            f"{r.sds_seconds * 1e3:>8.2f} {r.full_seconds / max(r.sds_seconds, 1e-12):>8.2f}"
        )
    return "\n".join(lines)
