"""Dense multivariate-normal math.

Everything here works with observations as rows. A conditional mean is
therefore an ``n x q`` matrix with one row per individual, and the
regression coefficient of a block ``b`` on a block ``a`` is the ``p_a x p_b``
matrix ``inv(cov_aa) @ cov_ab`` that right-multiplies residual rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import CovarianceNotPD, LayoutError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
SYMMETRY_RTOL = 1e-12


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises ``CovarianceNotPD`` instead of regularizing."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"covariance must be square, got shape {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise CovarianceNotPD("covariance has non-finite entries")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise CovarianceNotPD("covariance is not positive definite") from exc


def symmetrize(cov: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > rtol * scale:
        raise CovarianceNotPD("covariance is not symmetric")
    return 0.5 * (cov + cov.T)


def logdet_chol(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def chol_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = rhs`` for a lower factor ``L``."""
    return linalg.cho_solve((chol, True), rhs, check_finite=False)


def inv_from_chol(chol: np.ndarray) -> np.ndarray:
    return chol_solve(chol, np.eye(chol.shape[0]))


@dataclass(frozen=True)
class ParameterSet:
    """Mean vector and positive-definite covariance for ``p`` variables."""

    mean: np.ndarray
    cov: np.ndarray
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ShapeError(f"covariance must be square, got {cov.shape}")
        if mean.shape[0] != cov.shape[0]:
            raise ShapeError(f"mean has length {mean.shape[0]} but covariance is {cov.shape}")
        cov = symmetrize(cov)
        names = tuple(self.var_names) or tuple(f"x{i}" for i in range(mean.shape[0]))
        if len(names) != mean.shape[0]:
            raise ShapeError("var_names length does not match dimension")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "var_names", names)
        # fail fast on non-PD input
        _ = self.chol

    @property
    def p(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def chol(self) -> np.ndarray:
        return cholesky(self.cov)

    def subset(self, idx: Sequence[int]) -> "ParameterSet":
        idx = np.asarray(idx, dtype=int)
        return ParameterSet(
            self.mean[idx], self.cov[np.ix_(idx, idx)], tuple(self.var_names[i] for i in idx)
        )


@dataclass(frozen=True)
class ConditionalBlocks:
    """Split of a (conditional) covariance around the leading block of size ``p_k``.

    ``own`` is the covariance of the leading block, ``cross`` couples it to the
    remaining variables and ``rest`` is the (not yet conditioned) covariance of
    the remaining variables.
    """

    own: np.ndarray
    cross: np.ndarray
    rest: np.ndarray

    @property
    def p_own(self) -> int:
        return self.own.shape[0]

    @property
    def p_rest(self) -> int:
        return self.rest.shape[0]

    @cached_property
    def own_chol(self) -> np.ndarray:
        return cholesky(self.own)

    @cached_property
    def gain(self) -> np.ndarray:
        """``inv(own) @ cross``: regression of the rest on the leading block."""
        return chol_solve(self.own_chol, self.cross)

    def schur(self) -> np.ndarray:
        """Covariance of the rest conditional on the leading block."""
        out = self.rest - self.cross.T @ self.gain
        return 0.5 * (out + out.T)


@dataclass(frozen=True)
class DataPartition:
    """Observations held by one party: rows are individuals."""

    rows: np.ndarray
    col_ids: tuple[int, ...]
    row_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows.reshape(-1, 1)
        if rows.ndim != 2:
            raise ShapeError("partition rows must be a 2-d matrix")
        col_ids = tuple(int(c) for c in self.col_ids)
        row_ids = tuple(int(r) for r in self.row_ids) or tuple(range(rows.shape[0]))
        if len(col_ids) != rows.shape[1]:
            raise ShapeError(f"{len(col_ids)} column ids for {rows.shape[1]} columns")
        if len(row_ids) != rows.shape[0]:
            raise ShapeError(f"{len(row_ids)} row ids for {rows.shape[0]} rows")
        if any(b <= a for a, b in zip(col_ids, col_ids[1:])):
            raise LayoutError("column ids must be strictly increasing")
        if not np.all(np.isfinite(rows)):
            raise ShapeError("partition contains missing or non-finite values")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "col_ids", col_ids)
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    def select_rows(self, row_ids: Sequence[int]) -> "DataPartition":
        lookup = {r: i for i, r in enumerate(self.row_ids)}
        try:
            idx = [lookup[int(r)] for r in row_ids]
        except KeyError as exc:
            raise LayoutError(f"row {exc.args[0]} is not held by this partition") from None
        return DataPartition(self.rows[idx], self.col_ids, tuple(int(r) for r in row_ids))


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, DataPartition):
        return data.rows
    x = np.asarray(data, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def gaussian_loglik(x: np.ndarray, mean: np.ndarray, cov: np.ndarray, chol: np.ndarray | None = None) -> float:
    """Sum over rows of the normal log-density.

    ``mean`` is either a length-``p`` vector shared by all rows or an ``n x p``
    matrix of per-row means (as produced by conditioning).
    """
    x = _as_matrix(x)
    n, p = x.shape
    mean = np.asarray(mean, dtype=float)
    if mean.ndim == 1 and mean.shape[0] != p or mean.ndim == 2 and mean.shape != (n, p):
        raise ShapeError(f"mean of shape {mean.shape} does not fit data of shape {x.shape}")
    if cov.shape != (p, p):
        raise ShapeError(f"covariance of shape {cov.shape} does not fit {p} columns")
    if chol is None:
        chol = cholesky(cov)
    z = linalg.solve_triangular(chol, (x - mean).T, lower=True)
    quad = float(np.sum(z * z))
    return -0.5 * (n * p * LOG_2PI + n * logdet_chol(chol) + quad)


def log_likelihood(params: ParameterSet, data) -> float:
    """Full-data multivariate normal log-likelihood of ``params`` at ``data``."""
    x = _as_matrix(data)
    if x.shape[1] != params.p:
        raise ShapeError(f"data has {x.shape[1]} columns, parameters have dimension {params.p}")
    return gaussian_loglik(x, params.mean, params.cov, params.chol)


def split_cov(cov: np.ndarray, p_own: int) -> ConditionalBlocks:
    cov = np.asarray(cov, dtype=float)
    if not 0 < p_own <= cov.shape[0]:
        raise ShapeError(f"cannot split a {cov.shape[0]}-dim covariance at {p_own}")
    return ConditionalBlocks(cov[:p_own, :p_own], cov[:p_own, p_own:], cov[p_own:, p_own:])


def condition(blocks: ConditionalBlocks, observed, current_mean: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Condition the trailing variables on the observed leading block.

    ``current_mean`` is the ``n x (p_own + p_rest)`` conditional mean of the
    leading block and the rest given everything conditioned on so far (a
    length-``p`` vector is broadcast to every row). Returns the Schur
    complement covariance of the rest and its updated ``n x p_rest`` mean.
    """
    x = _as_matrix(observed)
    p_own = blocks.p_own
    if x.shape[1] != p_own:
        raise ShapeError(f"observed block has {x.shape[1]} columns, expected {p_own}")
    mean = np.asarray(current_mean, dtype=float)
    if mean.ndim == 1:
        mean = np.broadcast_to(mean, (x.shape[0], mean.shape[0]))
    if mean.shape != (x.shape[0], p_own + blocks.p_rest):
        raise ShapeError(f"current mean of shape {mean.shape} does not fit the blocks")
    resid = x - mean[:, :p_own]
    tail_mean = mean[:, p_own:] + resid @ blocks.gain
    return blocks.schur(), tail_mean


def chain_conditionals(cov: np.ndarray, sizes: Sequence[int]) -> list[ConditionalBlocks]:
    """Repeated Schur complements along consecutive column blocks.

    Entry ``k`` holds the covariance of block ``k`` given blocks ``< k`` and its
    cross-covariance with blocks ``> k`` (same conditioning).
    """
    cov = np.asarray(cov, dtype=float)
    if sum(sizes) != cov.shape[0] or any(s <= 0 for s in sizes):
        raise LayoutError(f"block sizes {list(sizes)} do not tile dimension {cov.shape[0]}")
    out = []
    current = cov
    for size in sizes:
        blocks = split_cov(current, size)
        out.append(blocks)
        if blocks.p_rest:
            current = blocks.schur()
    return out


def split_blocks(params: ParameterSet, column_sets: Sequence[Sequence[int]]) -> list[list[np.ndarray]]:
    """Cut ``params.cov`` into ``K x K`` blocks indexed by node.

    ``column_sets[k]`` lists the global columns of node ``k``; the sets must be
    disjoint and cover every column.
    """
    sets = [list(map(int, s)) for s in column_sets]
    flat = [c for s in sets for c in s]
    if len(flat) != len(set(flat)):
        raise LayoutError("column sets overlap")
    if sorted(flat) != list(range(params.p)):
        raise LayoutError("column sets do not cover every variable exactly once")
    return [[params.cov[np.ix_(a, b)] for b in sets] for a in sets]


def assemble_blocks(blocks: Sequence[Sequence[np.ndarray]], column_sets: Sequence[Sequence[int]]) -> np.ndarray:
    p = sum(len(s) for s in column_sets)
    out = np.empty((p, p))
    for a, row in zip(column_sets, blocks):
        for b, block in zip(column_sets, row):
            out[np.ix_(list(a), list(b))] = block
    return out


def chain_loglik(params: ParameterSet, data, sizes: Sequence[int]) -> list[float]:
    """Marginal then successive conditional log-likelihood of consecutive blocks.

    The terms sum to the joint log-likelihood; this is the plain (non-secure)
    chain that every partitioned evaluator must reproduce.
    """
    x = _as_matrix(data)
    if x.shape[1] != params.p:
        raise ShapeError("data width does not match parameters")
    mean = np.broadcast_to(params.mean, x.shape)
    terms = []
    start = 0
    for blocks in chain_conditionals(params.cov, sizes):
        stop = start + blocks.p_own
        xk = x[:, start:stop]
        terms.append(gaussian_loglik(xk, mean[:, : blocks.p_own], blocks.own, blocks.own_chol))
        if blocks.p_rest:
            _, mean = condition(blocks, xk, mean)
        start = stop
    return terms
