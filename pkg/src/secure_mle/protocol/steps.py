"""Node-local computations of the secure vertical pipeline.

Conventions (rows are observations, ``S_k`` is node ``k``'s covariance block
conditional on earlier nodes, ``C_k = inv(S_k) @ cross_k``):

* ``A1 = inv(S_k) (X_k - mu_tilde + R_k)^T`` and
  ``A2 = inv(S_k) (X_k - mu_tilde - R_k)^T + Q_k``, both ``p_k x n``.
* The node's noisy log-likelihood carries the usual ``-1/2`` factor. Writing
  ``mu_tilde = mu + P_k`` the true term is recovered as::

      LL_k = LL~_k + tr(P_k Q_k)/2
                   - [tr(P_k A1) + tr(P_k A2) + tr(P_k inv(S_k) P_k^T)]/2

  The first correction is applied by the next data node (it holds ``P_k``
  and ``Q_k``), the bracket by the central node at the very end.
* ``tr(P Q)`` for ``P`` of shape ``n x p_k`` and ``Q`` of shape ``p_k x n`` is
  the per-row coupling ``sum_i P[i] . Q[:, i]``; the ``n x n`` product is never
  formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import LayoutError, ProtocolOrderError, ShapeError
from ..mvn import LOG_2PI, ParameterSet, chain_conditionals, chol_solve, cholesky, logdet_chol


def uniform_noise(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    """Entries i.i.d. Uniform(-scale, scale); exact zeros when ``scale == 0``."""
    if scale == 0:
        return np.zeros(shape)
    return rng.uniform(-scale, scale, size=shape)


def trace_coupling(p: np.ndarray, q: np.ndarray) -> float:
    """``trace(p @ q)`` for ``p`` of shape ``n x m`` and ``q`` of shape ``m x n``."""
    if p.shape != q.T.shape:
        raise ShapeError(f"cannot couple {p.shape} with {q.shape}")
    return float(np.einsum("ij,ji->", p, q))


@dataclass
class CentralState:
    """What the central node prepares before a vertical evaluation starts."""

    covs: list[np.ndarray]           # S_k, conditional covariance of node k's block
    crosses: list[np.ndarray]        # cross_k, p_k x p_plus (empty for the last node)
    gains: list[np.ndarray | None]   # C_k = inv(S_k) cross_k
    noise: list[np.ndarray]          # P_k, n x p_k
    mu_tilde: list[np.ndarray]       # mu_k + P_k, n x p_k

    @property
    def K(self) -> int:
        return len(self.covs)

    def tail_mu_tilde(self, k: int) -> np.ndarray:
        """Noisy marginal means of every node after ``k`` side by side."""
        return np.hstack(self.mu_tilde[k + 1:])


def cn_initiate(params: ParameterSet, sizes: Sequence[int], n: int, rng: np.random.Generator,
                scale: float) -> CentralState:
    """Central node: conditional blocks for every node and noisy marginal means.

    ``params`` must already be ordered so that node ``k`` owns the ``k``-th
    consecutive block of ``sizes[k]`` variables. Needs no data.
    """
    if len(sizes) < 1 or n < 1:
        raise LayoutError("need at least one node and one row")
    chain = chain_conditionals(params.cov, sizes)
    covs, crosses, gains, noise, mu_tilde = [], [], [], [], []
    start = 0
    for blocks, size in zip(chain, sizes):
        covs.append(blocks.own)
        crosses.append(blocks.cross)
        gains.append(blocks.gain if blocks.p_rest else None)
        pk = uniform_noise(rng, (n, size), scale)
        noise.append(pk)
        mu_tilde.append(params.mean[start:start + size] + pk)
        start += size
    return CentralState(covs, crosses, gains, noise, mu_tilde)


def noisy_quadratic(resid: np.ndarray, r: np.ndarray, chol: np.ndarray) -> float:
    """``sum_i (d_i + r_i) inv(S) (d_i - r_i)^T + r_i inv(S) r_i^T``."""
    left = chol_solve(chol, (resid + r).T)
    cross = float(np.einsum("ij,ji->", resid - r, left))
    rr = float(np.einsum("ij,ji->", r, chol_solve(chol, r.T)))
    return cross + rr


def compute_noisy_ll(mu_tilde: np.ndarray, cov: np.ndarray, x: np.ndarray, r: np.ndarray) -> float:
    """Node ``k``'s log-likelihood term evaluated at its noisy conditional mean."""
    x = np.asarray(x, dtype=float)
    n, pk = x.shape
    if cov.shape != (pk, pk) or r.shape != (n, pk):
        raise ShapeError(f"block shapes {cov.shape}, {r.shape} do not fit data {x.shape}")
    chol = cholesky(cov)
    quad = noisy_quadratic(x - mu_tilde, r, chol)
    return -0.5 * (n * pk * LOG_2PI + n * logdet_chol(chol) + quad)


@dataclass
class ComputeResult:
    ll_running: float
    a1: np.ndarray
    a2: np.ndarray
    r: np.ndarray
    q: np.ndarray


def en_compute(mu_tilde: np.ndarray, cov: np.ndarray, x: np.ndarray, ll_star_running: float | None,
               rng: np.random.Generator, scale: float) -> ComputeResult:
    """Data node: fresh ``R_k``/``Q_k``, adjustment bundles, running noisy total."""
    x = np.asarray(x, dtype=float)
    n, pk = x.shape
    if mu_tilde.shape != (n, pk) or cov.shape != (pk, pk):
        raise ShapeError(f"mean {mu_tilde.shape} / covariance {cov.shape} do not fit data {x.shape}")
    r = uniform_noise(rng, (n, pk), scale)
    q = uniform_noise(rng, (pk, n), scale)
    chol = cholesky(cov)
    resid = x - mu_tilde
    a1 = chol_solve(chol, (resid + r).T)
    a2 = chol_solve(chol, (resid - r).T) + q
    ll_k = compute_noisy_ll(mu_tilde, cov, x, r)
    running = ll_k if ll_star_running is None else ll_star_running + ll_k
    return ComputeResult(running, a1, a2, r, q)


def cn_adjust(a1: np.ndarray, mu_tail: np.ndarray, cross: np.ndarray) -> np.ndarray:
    """Central node: ``B_k = mu_tail + A1^T cross``."""
    if a1.shape[0] != cross.shape[0] or a1.shape[1] != mu_tail.shape[0] or cross.shape[1] != mu_tail.shape[1]:
        raise ShapeError(f"A1 {a1.shape}, tail mean {mu_tail.shape} and cross {cross.shape} do not fit")
    return mu_tail + a1.T @ cross


def chain_correction(p: np.ndarray, q: np.ndarray) -> float:
    """Part of a node's masking removable by whoever holds ``P_k`` and ``Q_k``."""
    return 0.5 * trace_coupling(p, q)


def central_correction(p: np.ndarray, a1: np.ndarray, a2: np.ndarray, cov: np.ndarray) -> float:
    """Part of a node's masking that only the central node can remove."""
    chol = cholesky(cov)
    ppt = float(np.einsum("ij,ji->", p, chol_solve(chol, p.T)))
    return 0.5 * (trace_coupling(p, a1) + trace_coupling(p, a2) + ppt)


@dataclass
class AdjustResult:
    ll_star: float
    mu_tilde_own: np.ndarray
    mu_star_tail: np.ndarray | None
    m_new: np.ndarray | None


def en_adjust(b: np.ndarray, c: np.ndarray, r: np.ndarray, p: np.ndarray, q: np.ndarray,
              ll_tilde_running: float, m_prev: np.ndarray | None, p_own: int,
              rng: np.random.Generator, scale: float) -> AdjustResult:
    """Data node ``k+1``: strip node ``k``'s removable noise, recover own noisy mean.

    ``b``, ``c``, ``p`` come from the central node; ``r``, ``q``, ``m_prev`` from
    node ``k``. The tail of the recovered mean is re-masked with a fresh ``M``
    before it may go back to the central node; nothing is generated when this
    node is last in the chain.
    """
    for name, value in (("B", b), ("C", c), ("R", r), ("P", p), ("Q", q)):
        if value is None:
            raise ProtocolOrderError(f"ledger item {name} missing for adjustment")
    if r.shape != p.shape or c.shape[0] != p.shape[1] or b.shape != (p.shape[0], c.shape[1]):
        raise ShapeError("adjustment inputs have inconsistent shapes")
    ll_star = ll_tilde_running + chain_correction(p, q)
    mean = b - (r - p) @ c
    if m_prev is not None:
        mean = mean - m_prev
    own, tail = mean[:, :p_own], mean[:, p_own:]
    if tail.shape[1] == 0:
        return AdjustResult(ll_star, own, None, None)
    m_new = uniform_noise(rng, tail.shape, scale)
    return AdjustResult(ll_star, own, tail + m_new, m_new)


def fn_adjust(ll_tilde_total: float | None, p_last: np.ndarray | None, q_last: np.ndarray | None) -> float:
    """First node: remove the last node's chain residue before the central node sees the total."""
    if ll_tilde_total is None or p_last is None or q_last is None:
        raise ProtocolOrderError("first-node adjustment before the chain completed")
    return ll_tilde_total + chain_correction(p_last, q_last)


def cn_final(ll_star: float, noise: Sequence[np.ndarray], a1s: Sequence[np.ndarray | None],
             a2s: Sequence[np.ndarray | None], covs: Sequence[np.ndarray]) -> float:
    """Central node: remove every node's central residue; returns the clean total."""
    return ll_star - total_central_correction(noise, a1s, a2s, covs)


def total_central_correction(noise, a1s, a2s, covs) -> float:
    if any(a is None for a in a1s) or any(a is None for a in a2s) or len(a1s) != len(noise):
        raise ProtocolOrderError("final de-noising needs every node's bundles")
    return sum(central_correction(p, a1, a2, s) for p, a1, a2, s in zip(noise, a1s, a2s, covs))
