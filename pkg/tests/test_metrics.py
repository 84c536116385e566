import numpy as np
import pytest

from tppflow import metrics as mt
from tppflow.seqdata import EventSequence, simulate_hpp


def seq(times, horizon=5.0):
    return EventSequence(np.asarray(times, dtype=np.float64), horizon)


def test_counting_distance_examples():
    assert mt.counting_distance(seq([1.0, 2.0]), seq([1.0, 2.0])) == 0.0
    assert mt.counting_distance(seq([1.0]), seq([1.0, 3.0])) == pytest.approx(2.0)
    assert mt.counting_distance(seq([]), seq([2.0])) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        mt.counting_distance(seq([1.0], 5.0), seq([1.0], 6.0))


def test_counting_distance_symmetry_and_triangle(rng):
    for _ in range(200):
        a, b, c = (seq(np.sort(rng.uniform(0, 5, rng.integers(0, 8)))) for _ in range(3))
        dab = mt.counting_distance(a, b)
        dba = mt.counting_distance(b, a)
        assert dab == pytest.approx(dba, abs=1e-12)
        dac = mt.counting_distance(a, c)
        dcb = mt.counting_distance(c, b)
        assert dab <= dac + dcb + 1e-12


def test_counting_distance_triangle_bulk(rng):
    """10^4 random triples via the padded-matrix form of the distance."""
    n = 10_000
    width = 6
    def draw():
        t = np.sort(rng.uniform(0, 5, (n, width)), axis=1)
        keep = rng.integers(0, width + 1, n)
        t[np.arange(width)[None, :] >= keep[:, None]] = 5.0
        return t
    a, b, c = draw(), draw(), draw()
    dab = np.abs(a - b).sum(axis=1)
    dac = np.abs(a - c).sum(axis=1)
    dcb = np.abs(c - b).sum(axis=1)
    assert np.all(dab <= dac + dcb + 1e-12)


def test_distance_matrix_matches_pairwise(rng):
    xs = [seq(np.sort(rng.uniform(0, 5, rng.integers(0, 6)))) for _ in range(7)]
    ys = [seq(np.sort(rng.uniform(0, 5, rng.integers(0, 6)))) for _ in range(5)]
    mat = mt.distance_matrix(xs, ys)
    for i in range(7):
        for j in range(5):
            assert mat[i, j] == pytest.approx(mt.counting_distance(xs[i], ys[j]), abs=1e-12)


def test_mmd_identical_sets_is_zero(rng):
    xs = [seq(np.sort(rng.uniform(0, 5, 5))) for _ in range(40)]
    assert abs(mt.mmd(xs, xs)) < 1e-12
    assert mt.mmd([seq([1.0])], [seq([1.0])]) == pytest.approx(0.0, abs=1e-15)


def test_mmd_order_invariance(rng):
    xs = [seq(np.sort(rng.uniform(0, 5, 4))) for _ in range(25)]
    ys = [seq(np.sort(rng.uniform(0, 5, 8))) for _ in range(25)]
    v = mt.mmd(xs, ys)
    perm = rng.permutation(25)
    assert mt.mmd([xs[i] for i in perm], ys) == pytest.approx(v, abs=1e-12)


def test_mmd_separates_different_rates_quick():
    hits = 0
    for s in range(10):
        x = simulate_hpp(2.0, 5.0, 120, seed=1000 + s)
        x2 = simulate_hpp(2.0, 5.0, 120, seed=2000 + s)
        y = simulate_hpp(4.0, 5.0, 120, seed=3000 + s)
        hits += mt.mmd(x, x2) < mt.mmd(x, y)
    assert hits >= 9


def test_mmd_validation(rng):
    xs = [seq([1.0])]
    with pytest.raises(ValueError):
        mt.mmd([], xs)
    with pytest.raises(ValueError):
        mt.mmd(xs, [seq([1.0], horizon=6.0)])
    with pytest.raises(ValueError):
        mt.MmdConfig(sigma=-1.0)


def test_wasserstein_lengths_examples():
    a = [seq([]), seq([1.0, 2.0])]
    assert mt.wasserstein_lengths(a, list(a)) == 0.0
    assert mt.wasserstein_lengths([seq([])], [seq([1.0, 2.0])]) == pytest.approx(2.0)
    x = [seq([]), seq([1.0, 2.0])]
    y = [seq([1.0]), seq([1.0, 2.0, 3.0])]
    assert mt.wasserstein_lengths(x, y) == pytest.approx(1.0)
    assert mt.wasserstein_lengths(y, x) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mt.wasserstein_lengths([], x)


def test_wasserstein_lengths_unequal_sizes():
    # lengths {0,0,4} vs {2,2}: |F_a - F_b| is 2/3 on [0,2) and 1/3 on [2,4)
    a = [seq(np.arange(1, n + 1) * 0.1) for n in (0, 0, 4)]
    b = [seq(np.arange(1, n + 1) * 0.1) for n in (2, 2)]
    assert mt.wasserstein_lengths(a, b) == pytest.approx(2.0, abs=1e-12)
    # sorted-quantile formulation on equal-size sets: mean |sorted difference|
    c = [seq(np.arange(1, n + 1) * 0.1) for n in (0, 2)]
    d = [seq(np.arange(1, n + 1) * 0.1) for n in (1, 3)]
    assert mt.wasserstein_lengths(c, d) == pytest.approx(1.0)


def test_ks_exp1_behaviour(rng):
    passes = sum(mt.ks_exp1(np.random.default_rng(s).exponential(1.0, 10_000))[1]
                 for s in range(20))
    assert passes >= 19
    stat, ok = mt.ks_exp1(np.full(500, 0.1))
    assert not ok
    with pytest.raises(ValueError):
        mt.ks_exp1(np.array([]))
    with pytest.raises(ValueError):
        mt.ks_exp1(np.array([-1.0]))
