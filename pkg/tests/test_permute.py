import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpuzzle import ops
from mmpuzzle.errors import DataError, DimensionError, NumericError
from mmpuzzle.ops import backward, constant, gradcheck, param
from mmpuzzle.permute import (
    Permutation,
    apply_soft,
    doubly_stochastic_gap,
    hard_decode,
    perm_to_matrix,
    sinkhorn,
    sinkhorn_op,
)
from mmpuzzle.rng import Rng


def eq1_reference(x, iterations, temperature=1.0):
    """Literal exp-then-normalize recursion, kept separate from the library."""
    s = np.exp(np.asarray(x, dtype=np.float64) / temperature)
    for _ in range(iterations):
        s = s / s.sum(axis=0, keepdims=True)  # column normalization
        s = s / s.sum(axis=1, keepdims=True)  # row normalization
    return s


def brute_force_assignment(s):
    """Best permutation by exhaustive search, lexicographically first on ties."""
    n = s.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(s[i, perm[i]] for i in range(n))
        if total > best + 1e-12:
            best, best_perm = total, perm
    return np.array(best_perm)


def test_sinkhorn_1x1():
    assert np.allclose(sinkhorn(np.array([[5.0]]), 10), [[1.0]])


def test_sinkhorn_zeros_gives_uniform():
    for iters in (1, 3, 50):
        s = sinkhorn(np.zeros((3, 3)), iters)
        assert np.allclose(s, 1.0 / 3.0, atol=1e-12)


def test_sinkhorn_matches_literal_recursion():
    rng = Rng(21)
    for _ in range(5):
        x = rng.uniform(-2, 2, (4, 4), dtype=np.float64)
        for iters in (1, 2, 7):
            got = sinkhorn(x, iters)
            ref = eq1_reference(x, iters)
            assert np.allclose(got, ref, atol=1e-12)


def test_sinkhorn_2x2_fixed_point_oracle():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = sinkhorn(x, 100, temperature=1.0)
    # independent fixed-point run, iterated far past 1e-12 movement
    ref = eq1_reference(x, 2000)
    assert abs(np.abs(eq1_reference(x, 1999) - ref).max()) < 1e-12
    assert np.allclose(got, ref, atol=1e-9)
    a = got[0, 0]
    assert np.allclose(got, [[a, 1 - a], [1 - a, a]], atol=1e-9)


def test_sinkhorn_rows_and_columns_sum_to_one():
    rng = Rng(22)
    x = rng.uniform(-3, 3, (50, 6, 6))
    s = sinkhorn(x, 50, temperature=1.0)
    assert doubly_stochastic_gap(s) < 1e-6
    assert s.min() >= 0


def test_sinkhorn_input_validation():
    with pytest.raises(DataError):
        sinkhorn(np.zeros((2, 2)), 0)
    with pytest.raises(DataError):
        sinkhorn(np.zeros((2, 2)), 5, temperature=0.0)
    with pytest.raises(DimensionError):
        sinkhorn(np.zeros((2, 3)), 5)
    with pytest.raises(NumericError):
        sinkhorn(np.full((2, 2), 1e308), 5, temperature=1e-300)


def assignment_gap(x):
    """Gap between the best and second-best total over all permutations."""
    n = x.shape[0]
    totals = sorted(
        sum(x[i, perm[i]] for i in range(n))
        for perm in itertools.permutations(range(n))
    )
    return totals[-1] - totals[-2]


def test_sinkhorn_temperature_sharpening():
    rng = Rng(23)
    x = rng.uniform(0, 1, (4, 4), dtype=np.float64)
    target = brute_force_assignment(x)
    for tau in (0.05, 0.02, 0.01):
        s = sinkhorn(x, 50, temperature=tau)
        assert np.array_equal(hard_decode(s).mapping, target)
    # the converged plan concentrates once tau is small against the gap
    gap = assignment_gap(x)
    taus = [gap / 2, gap / 5, gap / 20]
    sharpness = [
        sinkhorn(x, 3000, temperature=t).max(axis=1).min() for t in taus
    ]
    assert sharpness == sorted(sharpness)
    assert sharpness[-1] > 0.95


def test_sinkhorn_gradient_matches_finite_differences():
    rng = Rng(24)
    for n in (2, 3, 5):
        x = rng.uniform(-1, 1, (n, n))
        r = rng.uniform(0.5, 1.5, (n, n))

        def f(xv):
            return ops.vsum(ops.mul(sinkhorn_op(xv, 10, temperature=0.7), constant(r)))

        assert gradcheck(f, [x], h=1e-5) < 1e-4


def test_sinkhorn_op_forward_matches_plain_sinkhorn():
    rng = Rng(25)
    x = rng.uniform(-1, 1, (3, 3))
    v = param(x)
    out = sinkhorn_op(v, 20, temperature=0.5)
    assert np.allclose(out.value, sinkhorn(x, 20, temperature=0.5), atol=1e-7)
    backward(ops.vsum(out))
    assert v.grad is not None and v.grad.shape == (3, 3)


def test_hard_decode_dominant_diagonal():
    p = hard_decode(np.array([[0.9, 0.1], [0.1, 0.9]]))
    assert np.array_equal(p.mapping, [0, 1])


def test_hard_decode_prefers_total_mass():
    p = hard_decode(np.array([[0.6, 0.4], [0.55, 0.45]]))
    # 0.6 + 0.45 = 1.05 beats 0.4 + 0.55 = 0.95
    assert np.array_equal(p.mapping, [0, 1])


def test_hard_decode_uniform_tie_breaks_to_identity():
    for n in (2, 3, 5):
        p = hard_decode(np.full((n, n), 1.0 / n))
        assert np.array_equal(p.mapping, np.arange(n))


def test_hard_decode_matches_exhaustive_search():
    rng = Rng(26)
    for _ in range(100):
        n = 2 + rng.choice(5)  # up to 6
        raw = rng.uniform(0, 1, (n, n), dtype=np.float64)
        s = sinkhorn(raw, 30)
        assert np.array_equal(hard_decode(s).mapping, brute_force_assignment(s))


def test_apply_soft_identity_swap_mean():
    patches = np.stack([np.zeros((2, 2)), np.ones((2, 2))]).astype(np.float32)
    assert np.array_equal(apply_soft(np.eye(2), patches), patches)
    swapped = apply_soft(np.array([[0.0, 1.0], [1.0, 0.0]]), patches)
    assert np.array_equal(swapped, patches[::-1])
    blended = apply_soft(np.full((2, 2), 0.5), patches)
    assert np.allclose(blended, 0.5)


def test_apply_soft_dimension_mismatch():
    with pytest.raises(DimensionError):
        apply_soft(np.eye(3), np.zeros((2, 4, 4)))


def test_perm_to_matrix_examples():
    assert np.array_equal(perm_to_matrix(Permutation.identity(3)), np.eye(3))
    assert np.array_equal(
        perm_to_matrix(Permutation(np.array([1, 0]))), [[0.0, 1.0], [1.0, 0.0]]
    )


def test_perm_matrix_round_trip_and_exact_rearrangement():
    rng = Rng(27)
    for _ in range(10):
        p = Permutation.random(6, rng)
        m = perm_to_matrix(p)
        assert hard_decode(m) == p
        patches = rng.uniform(0, 1, (6, 3, 3))
        out = apply_soft(m, patches)
        # output position p(i) holds patch i
        direct = np.empty_like(patches)
        direct[p.mapping] = patches
        assert np.array_equal(out, direct)


def test_permutation_validation_and_compose():
    with pytest.raises(DataError):
        Permutation(np.array([0, 0, 1]))
    a = Permutation(np.array([2, 0, 1]))
    assert a.inverse().compose(a) == Permutation.identity(3)
    b = Permutation(np.array([1, 2, 0]))
    ab = a.compose(b)
    assert all(ab.mapping[i] == a.mapping[b.mapping[i]] for i in range(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=7), st.integers(min_value=0, max_value=10**6))
def test_property_round_trip_random_permutations(n, seed):
    p = Permutation.random(n, Rng(seed))
    assert hard_decode(perm_to_matrix(p)) == p
    assert p.compose(p.inverse()) == Permutation.identity(n)
