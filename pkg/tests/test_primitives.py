import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from secure_mle.errors import LayoutError, RankError, ShapeError
from secure_mle.primitives import (
    MaskedAccumulator,
    complement_basis,
    dd_add,
    draw_mask,
    matmul_exchange,
    secure_matmul,
    secure_sum,
    two_sum,
    unmask,
)

finite = st.floats(-1e15, 1e15, allow_nan=False)


def test_secure_sum_example():
    assert secure_sum([1.5, -2.0, 4.25], np.random.default_rng(0)) == 3.75


@pytest.mark.parametrize("scale", [1e12, 1e15])
def test_secure_sum_exact_under_large_masks(scale):
    rng = np.random.default_rng(3)
    for _ in range(50):
        vals = rng.normal(size=rng.integers(2, 8)) * 100
        assert secure_sum(vals, rng, mask_scale=scale) == pytest.approx(math.fsum(vals), rel=1e-14, abs=1e-12)


def test_ring_of_one_rejected():
    with pytest.raises(LayoutError):
        secure_sum([1.0])
    with pytest.raises(LayoutError):
        MaskedAccumulator(["a"], 0.0).run({"a": 1.0})
    with pytest.raises(LayoutError):
        MaskedAccumulator(["a", "b"], 0.0).run({"c": 1.0})


def test_passed_tokens_hide_partials():
    acc = MaskedAccumulator(["a", "b", "c"], 1e12)
    assert acc.run({"a": 1.0, "b": 2.0, "c": 3.0}) == 6.0
    assert [(s, r) for s, r, _ in acc.passed] == [("a", "b"), ("b", "c"), ("c", "a")]
    for _, _, token in acc.passed:
        assert abs(token) > 1e11


@given(a=finite, b=finite)
def test_two_sum_error_free(a, b):
    s, err = two_sum(a, b)
    assert s == a + b
    # exact rational check
    from fractions import Fraction
    assert Fraction(a) + Fraction(b) == Fraction(s) + Fraction(err)


@given(values=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20), seed=st.integers(0, 2**32 - 1))
def test_masked_dd_accumulation(values, seed):
    rng = np.random.default_rng(seed)
    mask = draw_mask(rng, 1e15)
    hi, lo = dd_add(mask[0], mask[1], values[0])
    for v in values[1:]:
        hi, lo = dd_add(hi, lo, v)
    assert unmask(hi, lo, mask) == pytest.approx(math.fsum(values), abs=1e-6)


def test_zero_mask():
    assert draw_mask(np.random.default_rng(0), 0.0) == (0.0, 0.0)


def test_matmul_example():
    x1 = np.array([[1.0], [0.0], [0.0], [0.0]])
    x2 = np.array([[2.0], [3.0], [5.0], [7.0]])
    ex = matmul_exchange(x1, x2, a=2, rng=np.random.default_rng(1))
    assert ex.product == pytest.approx(np.array([[2.0]]), abs=1e-12)
    assert np.abs(x1.T @ ex.basis).max() < 1e-12
    assert np.allclose(ex.basis.T @ ex.basis, np.eye(2), atol=1e-12)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 30), p1=st.integers(1, 3), p2=st.integers(1, 3))
def test_matmul_matches_plain_product(seed, n, p1, p2):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.normal(size=(n, p1)), rng.normal(size=(n, p2))
    ex = matmul_exchange(x1, x2, rng=rng)
    assert np.allclose(ex.product, x1.T @ x2, atol=1e-9)
    assert np.abs(x1.T @ ex.basis).max() < 1e-10
    # W differs from X2 unless the mask rank is zero
    assert not np.allclose(ex.projected, x2)


def test_matmul_rank_bounds(rng):
    x1 = rng.normal(size=(5, 2))
    with pytest.raises(RankError):
        complement_basis(x1, 4, rng)
    with pytest.raises(RankError):
        complement_basis(x1, 0, rng)
    assert complement_basis(x1, 3, rng).shape == (5, 3)
    with pytest.raises(ShapeError):
        secure_matmul(x1, rng.normal(size=(4, 1)))


def test_matmul_vectors(rng):
    x1, x2 = rng.normal(size=10), rng.normal(size=10)
    assert secure_matmul(x1, x2, rng=rng) == pytest.approx(np.array([[x1 @ x2]]), abs=1e-10)


def test_matmul_zero_right_factor(rng):
    assert not secure_matmul(rng.normal(size=(6, 2)), np.zeros((6, 3)), rng=rng).any()


def test_matmul_orthogonal_columns():
    x1 = np.array([[1.0], [0.0], [0.0]])
    x2 = np.array([[0.0], [1.0], [0.0]])
    assert secure_matmul(x1, x2, a=1, rng=np.random.default_rng(2))[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_matmul_invariant_to_rank_and_basis(rng):
    x1, x2 = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    direct = x1.T @ x2
    outs = [secure_matmul(x1, x2, a=a, rng=np.random.default_rng(s)) for a in (1, 5, 17) for s in (0, 1)]
    for out in outs:
        assert np.allclose(out, direct, rtol=0, atol=1e-10)
    ex = matmul_exchange(x1, x2, a=5, rng=rng)
    assert np.linalg.matrix_rank(ex.basis.T) == 5
