"""Permutation mathematics: Sinkhorn normalization, decoding, application.

The Sinkhorn operator turns an arbitrary square score matrix into a doubly
stochastic ("soft permutation") matrix by exponentiating and alternately
normalizing columns then rows. It is computed in log space, which makes the
iterates exactly equal to the textbook exp-and-normalize recursion while
being immune to overflow, and it is differentiable through every unrolled
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError, DimensionError, NumericError
from .ops import Var, _node

__all__ = [
    "Permutation",
    "sinkhorn",
    "sinkhorn_op",
    "hard_decode",
    "apply_soft",
    "perm_to_matrix",
    "doubly_stochastic_gap",
]


@dataclass(frozen=True)
class Permutation:
    """Bijection on {0..n-1}; ``mapping[i]`` is the destination of element i."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        object.__setattr__(self, "mapping", m)
        if m.ndim != 1:
            raise DataError("permutation mapping must be 1-D")
        n = m.shape[0]
        if n == 0 or not np.array_equal(np.sort(m), np.arange(n)):
            raise DataError("mapping is not a bijection on {0..n-1}")

    @property
    def n(self) -> int:
        return self.mapping.shape[0]

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.n)
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Returns p with p(i) = self(other(i))."""
        return Permutation(self.mapping[other.mapping])

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(np.arange(n))

    @staticmethod
    def random(n: int, rng) -> "Permutation":
        return Permutation(rng.permutation(n))

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(
            self.mapping, other.mapping
        )


def _check_square(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {x.shape}")


def _logsumexp(v: np.ndarray, axis: int) -> np.ndarray:
    m = v.max(axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))


def _sinkhorn_forward(x: np.ndarray, iterations: int, temperature: float):
    """Log-domain Sinkhorn; returns exp(L) plus saved iterates for backward."""
    if iterations < 1:
        raise DataError("sinkhorn: iterations must be >= 1")
    if temperature <= 0:
        raise DataError("sinkhorn: temperature must be positive")
    _check_square(x)
    with np.errstate(over="ignore"):
        L = np.asarray(x, dtype=np.float64) / temperature
    if not np.all(np.isfinite(L)):
        raise NumericError(
            "sinkhorn: exp of scores overflows; increase the temperature"
        )
    saved = []
    for _ in range(iterations):
        cl = _logsumexp(L, axis=-2)  # column sums (over rows)
        A = L - cl
        rl = _logsumexp(A, axis=-1)
        saved.append((L, cl, A, rl))
        L = A - rl
    s64 = np.exp(L)
    return s64, saved


def _sinkhorn_backward(gs: np.ndarray, s64: np.ndarray, saved, temperature: float):
    gL = np.asarray(gs, dtype=np.float64) * s64
    for L, cl, A, rl in reversed(saved):
        # through L' = A - rowLSE(A)
        sm_r = np.exp(A - rl)
        gA = gL - sm_r * gL.sum(axis=-1, keepdims=True)
        # through A = L - colLSE(L)
        sm_c = np.exp(L - cl)
        gL = gA - sm_c * gA.sum(axis=-2, keepdims=True)
    return gL / temperature


def sinkhorn(
    x: np.ndarray, iterations: int, temperature: float = 1.0
) -> np.ndarray:
    """Doubly stochastic relaxation of a score matrix.

    Starting from exp(x / temperature), each iteration divides every column
    by its sum and then every row by its sum; ``iterations`` such passes are
    applied. Supports leading batch dimensions.
    """
    x = np.asarray(x)
    s64, _ = _sinkhorn_forward(x, iterations, temperature)
    return s64.astype(x.dtype if x.dtype.kind == "f" else np.float64)


def sinkhorn_op(x: Var, iterations: int, temperature: float = 1.0) -> Var:
    """Graph-recorded sinkhorn with exact gradients through the unrolling."""
    s64, saved = _sinkhorn_forward(x.value, iterations, temperature)
    out = s64.astype(x.value.dtype)

    def vjp(g):
        gx = _sinkhorn_backward(g, s64, saved, temperature)
        return (gx.astype(x.value.dtype),)

    return _node(out, (x,), vjp)


def doubly_stochastic_gap(s: np.ndarray) -> float:
    """Worst absolute deviation of any row or column sum from 1."""
    rows = np.abs(np.sum(s, axis=-1, dtype=np.float64) - 1.0).max()
    cols = np.abs(np.sum(s, axis=-2, dtype=np.float64) - 1.0).max()
    return float(max(rows, cols))


def _assignment_value(s: np.ndarray, rows, cols) -> float:
    return float(s[rows, cols].sum(dtype=np.float64))


def hard_decode(s: np.ndarray, atol: float = 1e-9) -> Permutation:
    """Project a doubly stochastic matrix to its best discrete permutation.

    Maximizes the total assigned mass via optimal linear assignment. Among
    assignments whose totals tie (within ``atol``), the lowest-index choice
    is fixed row by row, so e.g. a uniform matrix decodes to the identity.
    """
    s = np.asarray(s, dtype=np.float64)
    _check_square(s)
    if s.ndim != 2:
        raise DimensionError("hard_decode: expected a single 2-D matrix")
    n = s.shape[0]
    tol = atol * max(1.0, n)
    mapping = np.empty(n, dtype=np.int64)
    free = list(range(n))
    for i in range(n):
        cand_totals = []
        for c in free:
            rest_cols = [cc for cc in free if cc != c]
            if rest_cols:
                sub = s[np.ix_(range(i + 1, n), rest_cols)]
                rr, cc = linear_sum_assignment(-sub)
                rest = _assignment_value(sub, rr, cc)
            else:
                rest = 0.0
            cand_totals.append((c, s[i, c] + rest))
        top = max(t for _, t in cand_totals)
        chosen = next(c for c, t in cand_totals if t >= top - tol)
        mapping[i] = chosen
        free.remove(chosen)
    return Permutation(mapping)


def apply_soft(s: np.ndarray, patches: np.ndarray) -> np.ndarray:
    """Soft rearrangement: output patch j is sum_i s[i, j] * patch i."""
    s = np.asarray(s)
    patches = np.asarray(patches)
    _check_square(s)
    if patches.shape[0] != s.shape[0]:
        raise DimensionError(
            f"apply_soft: {patches.shape[0]} patches but {s.shape[0]}x"
            f"{s.shape[1]} matrix"
        )
    flat = patches.reshape(patches.shape[0], -1)
    out = s.T.astype(flat.dtype) @ flat
    return out.reshape(patches.shape)


def perm_to_matrix(p: Permutation, dtype=np.float32) -> np.ndarray:
    """0/1 matrix with a single 1 per row and column; row i hits column p(i)."""
    n = p.n
    m = np.zeros((n, n), dtype=dtype)
    m[np.arange(n), p.mapping] = 1
    return m
