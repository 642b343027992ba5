import numpy as np
import pytest

from mmpuzzle.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).uniform(size=16)
    b = Rng(42).uniform(size=16)
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Rng(1).uniform(size=16), Rng(2).uniform(size=16))


def test_substreams_are_independent_and_stable():
    r = Rng(7)
    a1 = r.substream("puzzles", 3).uniform(size=8)
    a2 = Rng(7).substream("puzzles", 3).uniform(size=8)
    b = Rng(7).substream("puzzles", 4).uniform(size=8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_substream_label_types():
    r = Rng(0)
    assert r.substream("train", 0).path != r.substream("train", 1).path
    with pytest.raises(TypeError):
        r.substream(1.5)
    with pytest.raises(ValueError):
        r.substream(-1)


def test_draw_dtypes():
    r = Rng(3)
    assert r.normal(size=4).dtype == np.float32
    assert r.uniform(size=4, dtype=np.float64).dtype == np.float64
    p = r.permutation(6)
    assert sorted(p.tolist()) == list(range(6))
