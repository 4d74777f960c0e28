import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from grouplab.assign import (brute_force_assign, group_wise_assign, hungarian,
                             one_to_many_assign, split_groups)


def exhaustive_min(cost):
    n, m = cost.shape
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def scripted_greedy(cost, k):
    """Sort every (query, gt) pair by cost and fill greedily; the plain-python version."""
    pairs = sorted((cost[q, j], q * cost.shape[1] + j, q, j)
                   for q in range(cost.shape[0]) for j in range(cost.shape[1]))
    used, picked = set(), [[] for _ in range(cost.shape[1])]
    for _, _, q, j in pairs:
        if q not in used and len(picked[j]) < k:
            used.add(q)
            picked[j].append(q)
    return picked


class TestHungarian:
    def test_single(self):
        a = hungarian([[0.0]])
        assert a.gt_to_query.tolist() == [0] and a.total_cost == 0.0

    def test_two_by_two(self):
        a = hungarian([[1.0, 2.0], [2.0, 1.0]])
        assert a.gt_to_query.tolist() == [0, 1] and a.total_cost == 2.0

    @pytest.mark.parametrize("seed", range(1000))
    def test_square_six_matches_all_permutations(self, seed):
        cost = np.random.default_rng(seed).uniform(0, 10, (6, 6))
        assert abs(hungarian(cost).total_cost - brute_force_assign(cost).total_cost) <= 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_against_plain_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(0, 10, (rng.integers(3, 7), 3))
        assert hungarian(cost).total_cost == pytest.approx(exhaustive_min(cost), abs=1e-9)

    def test_infeasible(self):
        with pytest.raises(ValueError, match="3 ground truths but only 2 queries"):
            hungarian(np.zeros((2, 3)))

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            hungarian([[np.nan]])

    def test_tie_prefers_lowest_query(self):
        assert hungarian(np.zeros((4, 1))).gt_to_query.tolist() == [0]

    @given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
                  elements=st.floats(0, 10)))
    @settings(max_examples=200)
    def test_injective_and_cost_consistent(self, cost):
        if cost.shape[1] > cost.shape[0]:
            cost = cost.T
        a = hungarian(cost)
        assert len(set(a.gt_to_query.tolist())) == cost.shape[1]
        assert a.gt_to_query.min() >= 0 and a.gt_to_query.max() < cost.shape[0]
        assert a.total_cost == pytest.approx(cost[a.gt_to_query, range(cost.shape[1])].sum(),
                                             abs=1e-9)
        assert a.total_cost == pytest.approx(brute_force_assign(cost).total_cost, abs=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(0, 10, (7, 4))
        a, b = hungarian(cost), hungarian(cost + 3.5)
        assert a.gt_to_query.tolist() == b.gt_to_query.tolist()
        assert b.total_cost == pytest.approx(a.total_cost + 4 * 3.5, abs=1e-9)


class TestBruteForce:
    def test_single_gt(self):
        assert brute_force_assign([[3.0], [1.0], [2.0]]).gt_to_query.tolist() == [1]

    def test_all_equal(self):
        assert brute_force_assign(np.full((5, 3), 2.0)).total_cost == 6.0

    def test_guard(self):
        with pytest.raises(ValueError, match="limited to 8"):
            brute_force_assign(np.zeros((9, 9)))


class TestGroupWise:
    def test_three_groups(self, rng):
        cost = rng.uniform(0, 1, (12, 2))
        out = group_wise_assign(split_groups(cost, 3))
        assert len(out) == 3
        assert sum(len(a.gt_to_query) for a in out) == 6
        for a in out:
            assert sorted(a.gt_to_query.tolist()) == sorted(set(a.gt_to_query.tolist()))

    def test_single_group_is_hungarian(self, rng):
        cost = rng.uniform(0, 1, (6, 3))
        assert group_wise_assign([cost])[0].gt_to_query.tolist() == \
            hungarian(cost).gt_to_query.tolist()

    def test_identical_groups(self, rng):
        c = rng.uniform(0, 1, (5, 3))
        out = group_wise_assign([c, c, c])
        assert all(a.gt_to_query.tolist() == out[0].gt_to_query.tolist() for a in out)

    def test_independence(self, rng):
        costs = [rng.uniform(0, 1, (5, 3)) for _ in range(3)]
        before = group_wise_assign(costs)
        costs[1] = rng.uniform(0, 1, (5, 3))
        after = group_wise_assign(costs)
        for g in (0, 2):
            assert before[g].gt_to_query.tolist() == after[g].gt_to_query.tolist()

    def test_infeasible_group_named(self):
        with pytest.raises(ValueError, match="group 1"):
            group_wise_assign([np.zeros((3, 2)), np.zeros((1, 2))])

    def test_split_rejects_uneven(self):
        with pytest.raises(ValueError):
            split_groups(np.zeros((7, 1)), 2)


class TestOneToMany:
    def test_multiplicity_one_is_injection(self, rng):
        cost = rng.uniform(0, 1, (6, 4))
        qs = one_to_many_assign(cost, 1).queries()
        assert len(qs) == 4 == len(set(qs))

    def test_single_gt_top3(self):
        cost = np.array([[5.0], [1.0], [3.0], [0.5], [9.0]])
        assert sorted(one_to_many_assign(cost, 3).gt_to_queries[0]) == [1, 2, 3]

    def test_contested_query(self):
        cost = np.array([[0.1, 0.2], [0.9, 0.8], [0.7, 0.3]])
        assert one_to_many_assign(cost, 1).gt_to_queries == scripted_greedy(cost, 1) == [[0], [2]]

    @pytest.mark.parametrize("seed", range(100))
    def test_against_scripted_greedy(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 4))
        cost = rng.uniform(0, 1, (12, int(rng.integers(1, 4))))
        got = one_to_many_assign(cost, k)
        assert got.gt_to_queries == scripted_greedy(cost, k)
        assert all(len(qs) == k for qs in got.gt_to_queries)
        assert len(set(got.queries())) == len(got.queries())

    def test_insufficient(self):
        with pytest.raises(ValueError, match="insufficient"):
            one_to_many_assign(np.zeros((5, 2)), 3)

    def test_bad_multiplicity(self):
        with pytest.raises(ValueError):
            one_to_many_assign(np.zeros((5, 2)), 0)
