"""Timing grid over (n, p, K) for single secure evaluations.

Each cell simulates ``n`` rows of a random ``p``-variate normal, splits the
columns over ``K`` nodes, and times evaluations at the pooled closed-form
MLE. The error column is the absolute gap to the pooled log-likelihood.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .mvn import ParameterSet, log_likelihood
from .oracle import closed_form_mle
from .partition import PartitionLayout
from .runtime import Federation, partitions_from_matrix

DEFAULT_CELL_CAP = 5_000_000


@dataclass(frozen=True)
class BenchRow:
    n: int
    p: int
    K: int
    reps: int
    seconds_per_eval: float
    ll_error: float
    ll_pooled: float


def random_params(p: int, rng: np.random.Generator) -> ParameterSet:
    a = rng.normal(size=(p, p))
    return ParameterSet(rng.normal(size=p), a @ a.T / p + np.eye(p))


def bench_cell(n: int, p: int, K: int, reps: int = 3, seed: int = 0, transport: str = "in_process",
               noise_scale: float | None = None) -> BenchRow:
    if not 1 <= K <= p:
        raise ConfigError(f"cannot split {p} columns over {K} nodes")
    if n <= p:
        raise ConfigError(f"cell n={n}, p={p} has no closed-form MLE")
    rng = np.random.default_rng([seed, n, p, K])
    truth = random_params(p, rng)
    data = rng.multivariate_normal(truth.mean, truth.cov, size=n)
    cols = [list(c) for c in np.array_split(np.arange(p), K)]
    layout = PartitionLayout.vertical(cols, n)
    mle = closed_form_mle(data)
    pooled = log_likelihood(mle, data)
    with Federation.build(layout, partitions_from_matrix(data, layout), noise_scale, seed,
                          transport=transport) as fed:
        value = fed.evaluate(mle)          # warm-up, also the accuracy check
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fed.evaluate(mle)
            times.append(time.perf_counter() - t0)
    return BenchRow(n, p, K, reps, float(np.median(times)), abs(value - pooled), pooled)


def grid(ns: Sequence[int], ps: Sequence[int], Ks: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(n, p, K) for n in ns for p in ps for K in Ks if K <= p]


def run_bench(cells: Iterable[tuple[int, int, int]], reps: int = 3, seed: int = 0,
              cell_cap: int = DEFAULT_CELL_CAP, transport: str = "in_process", progress=None) -> list[BenchRow]:
    """Time every cell; cells whose ``n * p * K`` exceeds ``cell_cap`` are refused up front."""
    cells = list(cells)
    if not cells:
        raise ConfigError("bench grid is empty")
    big = [c for c in cells if c[0] * c[1] * c[2] > cell_cap]
    if big:
        raise ConfigError(f"cells {big} exceed the size cap {cell_cap}")
    rows = []
    for n, p, K in cells:
        row = bench_cell(n, p, K, reps, seed, transport)
        rows.append(row)
        if progress:
            progress(row)
    return rows


def write_csv(rows: Sequence[BenchRow], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BenchRow.__dataclass_fields__))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def n_slopes(rows: Sequence[BenchRow]) -> dict[tuple[int, int], float]:
    """Log-log slope of time against n for every (p, K) with at least two n values."""
    out = {}
    for key in sorted({(r.p, r.K) for r in rows}):
        sub = sorted((r.n, r.seconds_per_eval) for r in rows if (r.p, r.K) == key)
        if len(sub) >= 2:
            out[key] = loglog_slope([s[0] for s in sub], [s[1] for s in sub])
    return out
