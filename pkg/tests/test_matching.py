import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hcseg.matching import hungarian_match


def brute_force(cost):
    """Exhaustive minimum over injections of the smaller side; sums in gt order."""
    n, g = cost.shape
    best = np.inf
    if g <= n:
        for perm in itertools.permutations(range(n), g):
            best = min(best, sum(cost[perm[j], j] for j in range(g)))
    else:
        for perm in itertools.permutations(range(g), n):
            best = min(best, sum(cost[i, perm[i]] for i in range(n)))
    return best


def canonical_total(cost, pairs):
    n, g = cost.shape
    if g <= n:
        return sum(cost[q, j] for q, j in sorted(pairs, key=lambda p: p[1]))
    return sum(cost[q, j] for q, j in sorted(pairs))


class TestHungarian:
    def test_diagonal_dominant(self):
        cost = np.ones((3, 3)) * 5 - 4 * np.eye(3)
        assert hungarian_match(cost).pairs == [(0, 0), (1, 1), (2, 2)]

    def test_anti_diagonal(self):
        cost = np.ones((3, 3)) * 10
        cost[[0, 1, 2], [2, 1, 0]] = 0.0
        assert hungarian_match(cost).pairs == [(0, 2), (1, 1), (2, 0)]

    def test_rectangular_unmatched_queries(self):
        cost = np.array([[1.0, 9.0], [9.0, 9.0], [9.0, 1.0]])
        r = hungarian_match(cost)
        assert r.pairs == [(0, 0), (2, 1)] and r.unmatched == [1] and r.total_cost == 2.0
        assert r.query_to_gt == {0: 0, 2: 1}

    def test_more_gt_than_queries(self):
        cost = np.array([[3.0, 1.0, 2.0]])
        r = hungarian_match(cost)
        assert r.pairs == [(0, 1)] and r.unmatched == []

    def test_empty(self):
        r = hungarian_match(np.zeros((4, 0)))
        assert r.pairs == [] and r.unmatched == [0, 1, 2, 3]

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        cost = np.ones((2, 2))
        cost[0, 1] = bad
        with pytest.raises(ValueError):
            hungarian_match(cost)

    def test_random_5x4_exhaustive(self, rng):
        cost = rng.random((5, 4))
        r = hungarian_match(cost)
        assert canonical_total(cost, r.pairs) == brute_force(cost)

    @given(st.integers(1, 6).flatmap(lambda n: st.integers(1, 6).flatmap(
        lambda g: arrays(np.float64, (n, g), elements=st.floats(-100, 100)))))
    def test_optimal_and_injective(self, cost):
        r = hungarian_match(cost)
        qs = [q for q, _ in r.pairs]
        gs = [g for _, g in r.pairs]
        assert len(set(qs)) == len(qs) and len(set(gs)) == len(gs)
        assert len(r.pairs) == min(cost.shape)
        assert canonical_total(cost, r.pairs) == pytest.approx(brute_force(cost), abs=1e-9)

    def test_integer_ties(self, rng):
        for _ in range(50):
            cost = rng.integers(0, 3, size=(4, 4)).astype(float)
            assert canonical_total(cost, hungarian_match(cost).pairs) == brute_force(cost)
