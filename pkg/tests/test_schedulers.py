from collections import Counter

import numpy as np
import pytest

from survsched.model import AgentState as S
from survsched.model import ScenarioConfig, initial_state, state_index, state_space_size
from survsched.schedulers import (DecisionContext, FixedPolicy, OnLine, PriorityQueue, RandomStream, RoundRobin,
                                  decide_fixed_policy, decide_on_line, decide_priority_queue,
                                  decide_round_robin, make_scheduler, ol_candidates, ol_heuristic, ol_keys)
from survsched.solver import FingerprintMismatch, VIParams, save_policy, value_iteration


def scen(p, C, tau, **kw):
    return ScenarioConfig.from_lists(p, C, tau, **kw)


def ctx(state, seed=0, slot=0):
    return DecisionContext(state, slot, RandomStream(seed))


# ---------------------------------------------------------------- round robin

def test_round_robin_follows_buffer_then_redraws():
    s = scen([0.1] * 3, [1] * 3, 3)
    rr = RoundRobin([2, 0, 1]).bind(s)
    c = ctx(initial_state(s))
    assert [decide_round_robin(c, rr) for _ in range(3)] == [2, 0, 1]
    nxt = [decide_round_robin(c, rr) for _ in range(3)]
    assert sorted(nxt) == [0, 1, 2]


def test_round_robin_fairness_and_determinism():
    s = scen([0.1] * 3, [1] * 3, 3)

    def run(seed):
        rr = RoundRobin().bind(s)
        rng = RandomStream(seed)
        return [rr.decide_index(0, t, rng) for t in range(300_000)]

    seq = run(5)
    assert Counter(seq) == {0: 100_000, 1: 100_000, 2: 100_000}
    for w in range(0, 300, 3):
        assert sorted(seq[w:w + 3]) == [0, 1, 2]
    assert seq == run(5)
    assert seq != run(6)


def test_round_robin_rejects_bad_buffer():
    with pytest.raises(ValueError):
        RoundRobin([0, 0, 1]).bind(scen([0.1] * 3, [1] * 3, 3))


# ---------------------------------------------------------------- priority queue

def test_priority_queue_unique_argmin():
    assert decide_priority_queue(ctx((S(3, 1), S(1, 1), S(2, 1)))) == 1


def test_priority_queue_random_ties():
    counts = Counter(decide_priority_queue(ctx((S(2, 1), S(2, 1), S(5, 1)), seed=i)) for i in range(2000))
    assert set(counts) == {0, 1}
    assert abs(counts[0] - 1000) < 150


def test_priority_queue_ignores_payload_and_channel():
    a = [decide_priority_queue(ctx((S(2, 1), S(2, 2), S(5, 1)), seed=i)) for i in range(200)]
    b = [decide_priority_queue(ctx((S(2, 2), S(2, 1), S(5, 3)), seed=i)) for i in range(200)]
    assert a == b


def test_tabulated_priority_queue_matches_direct_rule():
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 2], 4)
    pq = PriorityQueue("lowest").bind(s)
    for i in range(state_space_size(s)):
        from survsched.model import state_from_index
        st = state_from_index(i, s)
        taus = [t for t, _ in st]
        assert pq.decide_index(i, 0, None) == taus.index(min(taus))


# ---------------------------------------------------------------- on-line

def test_ol_heuristic_values():
    assert ol_heuristic(4, 2, 0.1) == pytest.approx(0.01)
    assert ol_heuristic(2, 1, 0.01) == pytest.approx(1e-4)
    assert ol_heuristic(5, 1, 0.3) == pytest.approx(0.3 ** 5)
    assert ol_heuristic(3, 1, 0.0) == 0.0
    assert ol_heuristic(3, 2, 1.0) == 1.0


def test_ol_heuristic_monotone_on_grid():
    ps = np.linspace(0, 0.99, 12)
    for t in range(1, 8):
        for c in range(1, 4):
            f = ol_heuristic(t, c, ps)
            assert (np.diff(f) >= 0).all()
    for p in (0.05, 0.5, 0.9):
        ratios = sorted({t / c for t in range(1, 9) for c in range(1, 4)})
        f = [p ** r for r in ratios]
        assert all(a >= b for a, b in zip(f, f[1:]))


def test_ol_serves_the_agent_closest_to_failure():
    s = scen([0.01, 0.1], [1, 2], 4)
    assert decide_on_line(ctx((S(2, 1), S(4, 2))), s) == 1
    # an agent about to expire is served even when its estimate looks small
    s3 = scen([1e-3, 1e-2, 1e-1], [2, 2, 3], 8)
    assert decide_on_line(ctx((S(1, 1), S(8, 2), S(5, 3))), s3) == 0


def test_ol_uniform_ties_for_identical_agents():
    s = scen([0.1, 0.1], [2, 2], 5)
    picks = Counter(decide_on_line(ctx((S(3, 2), S(3, 2)), seed=i), s) for i in range(1000))
    assert set(picks) == {0, 1} and abs(picks[0] - 500) < 100


def test_ol_perfect_channel_agent_not_chosen_over_a_risky_one():
    s = scen([0.0, 0.2], [1, 1], 4)
    for t0 in range(1, 5):
        for t1 in range(1, 5):
            assert ol_candidates((S(t0, 1), S(t1, 1)), s) == [1]


def test_ol_keys_vectorised_match_scalar():
    s = scen([1e-3, 1e-2, 1e-1], [2, 2, 3], 5)
    from survsched.model import decode_all, state_from_index
    tau_rem, c_rem = decode_all(s)
    keys = ol_keys(tau_rem, c_rem, s)
    for i in (0, 17, 200, state_space_size(s) - 1):
        st = state_from_index(i, s)
        single = ol_keys(np.array([[t for t, _ in st]]), np.array([[c for _, c in st]]), s)
        assert np.allclose(single[0][0], keys[0][i])


# ---------------------------------------------------------------- fixed policy

def test_fixed_policy_lookup_and_fingerprint(tmp_path):
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 2], 4)
    res = value_iteration(s)
    path = tmp_path / "p.json"
    save_policy(path, res, s, VIParams())
    pol = FixedPolicy.from_file(path).bind(s)
    st = initial_state(s)
    assert decide_fixed_policy(ctx(st), pol) == res.policy[state_index(st, s)]
    assert decide_fixed_policy(ctx(st, seed=3), pol) == decide_fixed_policy(ctx(st, seed=9), pol)
    with pytest.raises(FingerprintMismatch):
        FixedPolicy.from_file(path).bind(s.replace(tau=5))


def test_fixed_policy_one_state():
    s = scen([0.5], [1], 1)
    pol = FixedPolicy(np.zeros(state_space_size(s), dtype=int)).bind(s)
    assert all(pol.decide_index(i, 0, None) == 0 for i in range(state_space_size(s)))


def test_fixed_policy_rejects_bad_tables():
    s = scen([0.1, 0.2], [1, 1], 2)
    with pytest.raises(ValueError):
        FixedPolicy(np.zeros(3, dtype=int)).bind(s)
    with pytest.raises(ValueError):
        FixedPolicy(np.full(state_space_size(s), 2)).bind(s)


def test_make_scheduler_identifiers():
    assert isinstance(make_scheduler("rr"), RoundRobin)
    assert isinstance(make_scheduler("pq"), PriorityQueue)
    assert isinstance(make_scheduler("ol"), OnLine)
    for kind in ("vi", "dq"):
        with pytest.raises(ValueError):
            make_scheduler(kind)
    with pytest.raises(ValueError):
        make_scheduler("pf")


def test_all_deciders_return_valid_indices():
    s = scen([1e-3, 1e-2, 1e-1], [2, 2, 3], 4)
    rng = RandomStream(0)
    for sched in (RoundRobin(), PriorityQueue(), OnLine(), PriorityQueue("lowest"), OnLine("lowest")):
        sched.bind(s)
        for i in range(0, state_space_size(s), 7):
            assert 0 <= sched.decide_index(i, 0, rng) < 3
