import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memfigless.domain import SLOConstraints, compute_cost
from memfigless.forest import Hyperparams, fit_forest
from memfigless.optimizer import (
    BUDGET,
    DEADLINE,
    SUCCESS,
    Candidate,
    dominates,
    enumerate_candidates,
    filter_feasible,
    make_candidate,
    pareto_front,
    scalarize,
    select_configuration,
    violations,
)

INF = SLOConstraints(math.inf, math.inf)


def cand(memory, cost, duration, success=1.0):
    return Candidate(memory, float(duration), float(cost), success)


def brute_front(cands):
    """O(n^2) dominance check straight from the definition."""
    def dom(u, v):
        return (u.predicted_cost_usd <= v.predicted_cost_usd
                and u.predicted_duration_ms <= v.predicted_duration_ms
                and (u.predicted_cost_usd < v.predicted_cost_usd
                     or u.predicted_duration_ms < v.predicted_duration_ms))
    return [c for c in cands if not any(dom(o, c) for o in cands)]


def constant_forest(duration=100.0, used=64.0, success=1.0):
    X = np.array([[128.0, 1.0], [3008.0, 1.0]])
    Y = np.array([[duration, used, success]] * 2)
    return fit_forest(X, Y, Hyperparams(n_estimators=1, bootstrap=False))


def test_candidate_grid_sizes():
    f = constant_forest()
    assert len(enumerate_candidates(f, [5.0])) == 2881
    assert len(enumerate_candidates(f, [5.0], step_mb=128)) == 23
    with pytest.raises(ValueError):
        enumerate_candidates(f, [5.0], step_mb=0)


def test_constant_forest_costs_increase():
    cands = enumerate_candidates(constant_forest(), [5.0])
    assert [c.memory for c in cands] == list(range(128, 3009))
    assert len({c.predicted_duration_ms for c in cands}) == 1
    costs = [c.predicted_cost_usd for c in cands]
    assert all(a < b for a, b in zip(costs, costs[1:]))


def test_candidate_cost_matches_billing_exactly():
    X = np.array([[128.0, 1.0], [1024.0, 1.0], [3008.0, 1.0]])
    Y = np.array([[900.0, 50.0, 1.0], [300.0, 50.0, 1.0], [120.0, 50.0, 1.0]])
    f = fit_forest(X, Y, Hyperparams(n_estimators=1, bootstrap=False))
    for c in enumerate_candidates(f, [1.0], step_mb=7):
        assert c.predicted_cost_usd == compute_cost(c.predicted_duration_ms, c.memory).cost_usd
        assert c == make_candidate(c.memory, c.predicted_duration_ms, c.predicted_success,
                                   c.predicted_memory_used)


def test_filter_examples():
    cands = [cand(128, 2e-5, 100), cand(256, 5e-5, 50)]
    assert filter_feasible(cands, INF, 0.0).feasible == cands
    assert filter_feasible(cands, SLOConstraints(0.0, math.inf), 0.0).feasible == []
    out = filter_feasible(cands, SLOConstraints(60, 3e-5), 0.5)
    assert out.feasible == []
    assert out.counts == {DEADLINE: 1, BUDGET: 1, SUCCESS: 0}
    assert [r[1] for r in out.rejected] == [(DEADLINE,), (BUDGET,)]


def test_success_threshold():
    c = cand(128, 1e-6, 10, success=0.4)
    assert violations(c, INF, 0.5) == (SUCCESS,)
    assert violations(c, INF, 0.4) == ()


cand_lists = st.lists(
    st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 1)),
    min_size=0, max_size=40,
).map(lambda rows: [cand(128 + i, c, d, s) for i, (c, d, s) in enumerate(rows)])

constraint_st = st.builds(SLOConstraints, st.floats(0, 6), st.floats(0, 6))


@given(cand_lists, constraint_st, st.floats(0, 1))
def test_filter_subset_and_idempotent(cands, cons, tau):
    once = filter_feasible(cands, cons, tau).feasible
    assert all(c in cands for c in once)
    assert filter_feasible(once, cons, tau).feasible == once
    assert once == [c for c in cands if not violations(c, cons, tau)]


def test_front_examples():
    one = [cand(128, 1, 1)]
    assert pareto_front(one) == one
    a, b, c = cand(128, 1, 2), cand(256, 2, 1), cand(384, 2, 2)
    assert pareto_front([c, b, a]) == [a, b]
    d1, d2 = cand(128, 1, 1), cand(256, 1, 1)
    assert pareto_front([d1, d2]) == [d1, d2]
    assert pareto_front([]) == []


@given(cand_lists)
def test_front_matches_brute_force(cands):
    front = pareto_front(cands)
    assert sorted(front, key=lambda c: c.memory) == sorted(brute_front(cands), key=lambda c: c.memory)
    assert not any(dominates(u, v) for u in front for v in front)
    keys = [(c.predicted_cost_usd, c.predicted_duration_ms) for c in front]
    assert keys == sorted(keys)


def test_scalarize_examples():
    front = [cand(128, 0, 10), cand(256, 10, 0)]
    assert scalarize(front, (0.5, 0.5)) == [0.5, 0.5]
    assert scalarize([cand(128, 3, 3)], (0.5, 0.5)) == [0.0]
    costs = [cand(128, 1, 9), cand(256, 4, 2), cand(384, 2, 5)]
    z = scalarize(costs, (1.0, 0.0))
    assert np.argsort(z).tolist() == [0, 2, 1]


def test_select_examples():
    only = cand(512, 1e-5, 100)
    assert select_configuration([only], INF).chosen == only
    # unique minimum Z wins regardless of memory
    front = [cand(2048, 1.0, 1.0), cand(256, 0.0, 10.0), cand(1024, 10.0, 0.0)]
    assert select_configuration(front, INF).chosen.memory == 2048
    # equal Z: lowest memory
    tie = [cand(512, 0, 10), cand(256, 10, 0)]
    assert select_configuration(tie, INF).chosen.memory == 256


def test_select_infeasible_reports_diagnostics():
    res = select_configuration([cand(128, 1, 100), cand(256, 2, 90)], SLOConstraints(50, 10))
    assert res.chosen is None and not res.feasible
    assert res.rejections[DEADLINE] == 2
    d = res.to_dict(include_front=True)
    assert d["chosen"] is None and d["feasible_count"] == 0


@given(cand_lists, constraint_st, st.sampled_from([(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (0.3, 0.7)]))
def test_winner_is_feasible_and_on_front(cands, cons, w):
    res = select_configuration(cands, cons, weights=w)
    if res.chosen is not None:
        assert violations(res.chosen, cons) == ()
        assert res.chosen in res.pareto_front


@given(cand_lists.filter(bool), st.floats(1e-3, 1e3))
def test_cost_scaling_leaves_selection(cands, alpha):
    scaled = [Candidate(c.memory, c.predicted_duration_ms, c.predicted_cost_usd * alpha,
                        c.predicted_success) for c in cands]
    a = select_configuration(cands, INF, tau=0.0)
    b = select_configuration(scaled, INF, tau=0.0)
    assert a.chosen.memory == b.chosen.memory


def test_time_only_weight_picks_fastest():
    X = np.array([[m, 1.0] for m in range(128, 3009, 64)])
    Y = np.array([[1e5 / m, 50.0, 1.0] for m in range(128, 3009, 64)])
    f = fit_forest(X, Y, Hyperparams(n_estimators=1, bootstrap=False))
    cands = enumerate_candidates(f, [1.0])
    res = select_configuration(cands, INF, weights=(0.0, 1.0))
    assert res.chosen.predicted_duration_ms == min(c.predicted_duration_ms for c in res.pareto_front)
