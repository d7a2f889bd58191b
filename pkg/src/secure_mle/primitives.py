"""Stand-alone secure primitives: ring summation and two-party matrix product."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LayoutError, RankError, ShapeError


@dataclass
class MaskedAccumulator:
    """Ring summation where the initiator hides the running total behind a mask.

    ``order[0]`` is the initiator. It starts the token at ``mask`` (plus its own
    value), every later party adds its value, and when the token comes back
    the initiator subtracts the mask. ``passed`` records the value on each
    hop in ring order, i.e. exactly what each receiver sees.

    The token is a double-double pair so a mask many orders of magnitude
    above the values costs no precision; ``mask_low`` masks the low word.
    """

    order: Sequence[str]
    mask: float
    mask_low: float = 0.0
    passed: list[tuple[str, str, float]] = field(default_factory=list)
    value: float | None = None

    def run(self, values: dict[str, float]) -> float:
        if len(self.order) < 2:
            raise LayoutError("secure summation needs a ring of at least two parties")
        missing = set(values) - set(self.order)
        if missing:
            raise LayoutError(f"parties {sorted(missing)} are not in the ring")
        self.passed.clear()
        hi, lo = dd_add(self.mask, self.mask_low, float(values.get(self.order[0], 0.0)))
        for sender, receiver in zip(self.order, self.order[1:]):
            self.passed.append((sender, receiver, hi))
            hi, lo = dd_add(hi, lo, float(values.get(receiver, 0.0)))
        self.passed.append((self.order[-1], self.order[0], hi))
        self.value = unmask(hi, lo, (self.mask, self.mask_low))
        return self.value


def secure_sum(values: Sequence[float], rng: np.random.Generator | None = None, mask_scale: float = 1e12,
               mask: float | None = None) -> float:
    """Sum one value per party with a masked ring; party 0 initiates."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise LayoutError("secure summation needs at least two parties")
    rng = rng if rng is not None else np.random.default_rng()
    if mask is None:
        mask, low = draw_mask(rng, mask_scale)
    else:
        low = 0.0
    order = [f"party{i + 1}" for i in range(len(values))]
    acc = MaskedAccumulator(order, mask, low)
    return acc.run(dict(zip(order, values)))


@dataclass(frozen=True)
class MatmulExchange:
    """Everything that crosses between the two parties, plus the result."""

    basis: np.ndarray      # Z, sent from party 1 to party 2
    projected: np.ndarray  # W, sent from party 2 to party 1
    product: np.ndarray    # X1^T X2, held by party 1


def complement_basis(x1: np.ndarray, a: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``n x a`` orthonormal basis of a subspace orthogonal to ``col(x1)``."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    n = x1.shape[0]
    rank = int(np.linalg.matrix_rank(x1))
    if a < 1 or a > n - rank:
        raise RankError(f"rank parameter a={a} must lie in [1, {n - rank}] for n={n}, rank(X1)={rank}")
    q, _ = np.linalg.qr(x1)
    q = q[:, :rank] if rank < q.shape[1] else q
    g = rng.standard_normal((n, a))
    g -= q @ (q.T @ g)
    # second pass keeps Z orthogonal to X1 at the 1e-15 level
    g -= q @ (q.T @ g)
    z, _ = np.linalg.qr(g)
    return z


def default_rank(n: int, p1: int) -> int:
    return max(1, min(n - p1, n // 2))


def matmul_exchange(x1, x2, a: int | None = None, rng: np.random.Generator | None = None) -> MatmulExchange:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    x1 = x1.reshape(-1, 1) if x1.ndim == 1 else x1
    x2 = x2.reshape(-1, 1) if x2.ndim == 1 else x2
    if x1.shape[0] != x2.shape[0]:
        raise ShapeError(f"parties hold {x1.shape[0]} and {x2.shape[0]} rows")
    rng = rng if rng is not None else np.random.default_rng()
    a = default_rank(x1.shape[0], x1.shape[1]) if a is None else a
    z = complement_basis(x1, a, rng)
    w = x2 - z @ (z.T @ x2)
    return MatmulExchange(z, w, x1.T @ w)


def secure_matmul(x1, x2, a: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """``X1^T X2`` where party 1 only ever sees ``W`` and party 2 only ``Z``."""
    return matmul_exchange(x1, x2, a, rng).product


def two_sum(a: float, b: float) -> tuple[float, float]:
    """Error-free transformation: ``a + b == s + err`` exactly."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def dd_add(hi: float, lo: float, value: float) -> tuple[float, float]:
    """Add a float to the double-double ``hi + lo``."""
    s, err = two_sum(hi, value)
    return s, lo + err


def draw_mask(rng: np.random.Generator, scale: float) -> tuple[float, float]:
    """Random ``(hi, lo)`` mask; ``lo`` covers the bits below ``hi``'s last place.

    ``|hi|`` lies in ``[scale / 10, scale]`` with a random sign, so every
    token on the ring sits at least ``scale / 10`` away from its partial sum.
    """
    if scale == 0:
        return 0.0, 0.0
    hi = float(rng.choice((-1.0, 1.0)) * rng.uniform(0.1 * scale, scale))
    return hi, float(rng.uniform(-1.0, 1.0) * np.spacing(hi))


def unmask(hi: float, lo: float, mask: tuple[float, float]) -> float:
    return (hi - mask[0]) + (lo - mask[1])
