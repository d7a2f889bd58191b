"""Pooled-data reference evaluators.

Everything here needs the full data matrix in one place, which the
protocol exists to avoid; these are ground truths for tests, benchmarks
and the audit, never something a node runs.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import CovarianceNotPD, LayoutError, RankError
from .mvn import LOG_2PI, DataPartition, ParameterSet, cholesky, condition, log_likelihood, split_cov
from .partition import PartitionLayout


def pool(partitions: Mapping[str, DataPartition], layout: PartitionLayout) -> np.ndarray:
    """Reassemble the full ``n x p`` matrix from node partitions."""
    out = np.full((layout.n, layout.p), np.nan)
    for nd in layout.nodes:
        part = partitions[nd.name]
        lookup = {r: i for i, r in enumerate(part.row_ids)}
        idx = [lookup[r] for r in nd.rows]
        out[np.ix_(nd.rows, nd.cols)] = part.rows[idx]
    if np.isnan(out).any():
        raise LayoutError("partitions leave cells of the grid empty")
    return out


def pooled_ll(params: ParameterSet, pooled: np.ndarray) -> float:
    return log_likelihood(params, pooled)


def per_row_ll(params: ParameterSet, pooled: np.ndarray) -> float:
    """Independent density evaluation: explicit inverse and determinant, one row at a time."""
    pooled = np.atleast_2d(np.asarray(pooled, dtype=float))
    inv = np.linalg.inv(params.cov)
    _, logdet = np.linalg.slogdet(params.cov)
    total = 0.0
    for row in pooled:
        d = row - params.mean
        total += -0.5 * (params.p * LOG_2PI + logdet + d @ inv @ d)
    return total


def closed_form_mle(pooled: np.ndarray) -> ParameterSet:
    """Sample mean and n-denominator covariance.

    Raises ``RankError`` when ``n <= p`` and ``CovarianceNotPD`` when the
    sample covariance is singular anyway (use ``mle_moments`` to inspect it).
    """
    pooled = np.atleast_2d(np.asarray(pooled, dtype=float))
    n, p = pooled.shape
    mean, cov = mle_moments(pooled)
    if n <= p:
        raise RankError(f"closed-form MLE needs n > p, got n={n}, p={p}")
    eig = np.linalg.eigvalsh(cov)
    # Cholesky can squeeze through an exactly singular matrix on rounding
    if eig[0] <= p * np.finfo(float).eps * max(eig[-1], np.finfo(float).tiny):
        raise CovarianceNotPD("sample covariance is singular")
    return ParameterSet(mean, cov)


def mle_moments(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and n-denominator covariance, with no rank or positive-definiteness check."""
    pooled = np.atleast_2d(np.asarray(pooled, dtype=float))
    n = pooled.shape[0]
    mean = pooled.mean(axis=0)
    d = pooled - mean
    return mean, d.T @ d / n


def nonsecure_pass(params: ParameterSet, layout: PartitionLayout,
                   partitions: Mapping[str, DataPartition]) -> float:
    """Plain chain over a vertical layout: each node conditions on its own data and passes on.

    Node ``k`` receives the running total, the covariance of every later
    variable given nodes ``1..k``, and the per-row conditional mean of
    those variables; it adds its own term and conditions on its columns.
    """
    if layout.kind != "vertical":
        raise LayoutError("the passing algorithm needs a vertical layout")
    chain = sorted(layout.nodes, key=lambda nd: nd.cols[0])
    order = [c for nd in chain for c in nd.cols]
    sub = params.subset(order)
    n = layout.n
    cov = sub.cov
    mean = np.tile(sub.mean, (n, 1))
    total = 0.0
    for nd in chain:
        part = partitions[nd.name]
        lookup = {r: i for i, r in enumerate(part.row_ids)}
        x = part.rows[[lookup[r] for r in range(n)]]
        pk = x.shape[1]
        own = cov[:pk, :pk]
        chol = cholesky(own)
        d = x - mean[:, :pk]
        z = np.linalg.solve(chol, d.T)
        total += -0.5 * (n * pk * LOG_2PI + 2 * n * np.sum(np.log(np.diag(chol))) + float(np.sum(z * z)))
        if cov.shape[0] == pk:
            break
        blocks = split_cov(cov, pk)
        cov, mean = condition(blocks, x, mean)
    return total


class PooledEvaluator:
    """Objective with the same interface as ``Federation`` but on pooled data."""

    def __init__(self, pooled: np.ndarray):
        self.pooled = np.atleast_2d(np.asarray(pooled, dtype=float))
        self.evaluations = 0

    def evaluate(self, params: ParameterSet, mode: str | None = None) -> float:
        self.evaluations += 1
        return log_likelihood(params, self.pooled)

    def close(self) -> None:
        pass
