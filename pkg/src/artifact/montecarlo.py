"""Deterministic chunked Monte Carlo reduction.

Paths are split into fixed chunks that depend only on the grid, never on the
number of workers. Chunk sums are then combined in chunk order, so estimates
are bit-identical for any level of parallelism.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class Estimate:
    price: float
    std_error: float
    n_paths: int

    def __iter__(self):
        return iter((self.price, self.std_error))

    def z_score(self, reference: float) -> float:
        if self.std_error == 0:
            return 0.0 if self.price == reference else math.copysign(math.inf, self.price - reference)
        return (self.price - reference) / self.std_error


@dataclass(frozen=True)
class Moments:
    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        x = np.asarray(x, dtype=float)
        return cls(int(x.size), float(x.sum()), float(np.square(x).sum()))

    def __add__(self, other: "Moments") -> "Moments":
        return Moments(self.count + other.count, self.total + other.total, self.total_sq + other.total_sq)

    def estimate(self) -> Estimate:
        if self.count == 0:
            return Estimate(0.0, 0.0, 0)
        mean = self.total / self.count
        var = max(self.total_sq / self.count - mean * mean, 0.0)
        se = math.sqrt(var / max(self.count - 1, 1)) if self.count > 1 else 0.0
        return Estimate(mean, se, self.count)


def map_chunks(fn: Callable, jobs: Sequence, workers: int = 1) -> list:
    """Apply fn to each job, preserving job order; fn and jobs must be picklable when workers > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def reduce_moments(parts: Sequence[Moments]) -> Estimate:
    acc = Moments()
    for p in parts:
        acc = acc + p
    return acc.estimate()
