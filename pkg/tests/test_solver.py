import json

import numpy as np
import pytest

from oracles import brute_force_optimum, policy_iteration
from survsched.model import ScenarioConfig, build_kernel, initial_state, state_space_size
from survsched.solver import (FingerprintMismatch, VIParams, extract_policy, load_policy, policy_value_exact,
                              q_table, q_value, save_policy, value_iteration)


def scen(p, C, tau, **kw):
    return ScenarioConfig.from_lists(p, C, tau, **kw)


ONE = scen([0.5], [1], 1, discount=0.9)


def test_params_validation():
    with pytest.raises(ValueError):
        VIParams(epsilon=0)
    with pytest.raises(ValueError):
        VIParams(max_iterations=0)


def test_q_value_hand_evaluation():
    v = np.full(state_space_size(ONE), -5.0)
    assert q_value(initial_state(ONE), 0, v, ONE) == pytest.approx(-5.0)


def test_q_value_perfect_channel_is_zero():
    s = scen([0.0, 0.0], [1, 2], 3)
    v = np.zeros(state_space_size(s))
    assert q_value(initial_state(s), 0, v, s) == 0.0


def test_q_with_zero_values_is_expected_one_step_reward():
    s = scen([0.3, 0.2], [1, 1], 2)
    k = build_kernel(s)
    q = q_table(np.zeros(k.n_states), k)
    expected = (k.prob[None] * k.reward).sum(axis=2)
    assert np.allclose(q, expected)


def test_one_state_closed_form():
    res = value_iteration(ONE)
    assert res.converged
    assert res.values == pytest.approx(-5.0, abs=1e-5)
    assert set(res.policy) == {0}
    assert policy_value_exact(res.policy, ONE) == pytest.approx(-5.0, abs=1e-5)


def test_perfect_channels_have_zero_value():
    s = scen([0.0, 0.0, 0.0], [1, 1, 2], 4)
    res = value_iteration(s)
    assert res.values[-1] == 0.0


def test_iterates_monotone_bounded_and_contracting():
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 2], 4)
    k = build_kernel(s)
    lam = s.discount
    v = np.zeros(k.n_states)
    prev_delta = None
    for i in range(60):
        v_new = q_table(v, k).max(axis=1)
        assert (v_new <= v + 1e-15).all()
        assert (v_new >= -s.n_agents / (1 - lam) - 1e-12).all()
        delta = np.abs(v_new - v).max()
        assert delta <= lam ** i * s.n_agents / (1 - lam) + 1e-12
        if prev_delta is not None:
            assert delta <= lam * prev_delta + 1e-15
        prev_delta, v = delta, v_new


def test_non_convergence_is_flagged():
    res = value_iteration(scen([0.1, 0.2], [1, 2], 3), VIParams(max_iterations=3))
    assert not res.converged and res.iterations == 3 and res.residual > 0


def test_tie_break_lowest_index():
    s = scen([0.2, 0.2], [1, 1], 3)
    res = value_iteration(s)
    # symmetric fresh state: both agents tie
    assert res.policy[-1] == 0


def test_policy_shift_invariance():
    s = scen([1e-2, 1e-1], [1, 2], 4)
    res = value_iteration(s)
    assert np.array_equal(extract_policy(res.values + 3.0, s), res.policy)


def test_policy_evaluation_reproduces_vi_values():
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 2], 4)
    params = VIParams()
    res = value_iteration(s, params)
    v_pi = policy_value_exact(res.policy, s, params)
    lam = s.discount
    assert np.abs(v_pi - res.values).max() <= 2 * params.epsilon * lam / (1 - lam)


def test_any_policy_is_dominated_by_vi():
    s = scen([1e-2, 1e-1], [2, 1], 3)
    res = value_iteration(s)
    rng = np.random.default_rng(1)
    k = build_kernel(s)
    for _ in range(20):
        pol = rng.integers(0, 2, size=k.n_states)
        assert (policy_value_exact(pol, s, kernel=k) <= res.values + 1e-5).all()


def test_greedy_policy_is_a_fixed_point():
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 3], 4)
    k = build_kernel(s)
    res = value_iteration(s, kernel=k)
    v_pi = policy_value_exact(res.policy, s, kernel=k)
    q = q_table(v_pi, k)
    again = q.argmax(axis=1)
    top2 = np.sort(q, axis=1)
    gap = top2[:, -1] - top2[:, -2]
    clear = gap > 10 * VIParams().epsilon
    assert np.array_equal(again[clear], res.policy[clear])


TINY = [
    scen([0.5], [1], 1),
    scen([0.3], [2], 2),
    scen([0.1, 0.4], [1, 1], 1),
    scen([0.1, 0.4], [1, 1], 2),
    scen([0.2, 0.5], [2, 1], 1),
    scen([0.1, 0.2, 0.3], [1, 1, 1], 1),
    scen([0.3, 0.3], [1, 1], 1, expiry="reset"),
]


@pytest.mark.parametrize("s", TINY, ids=lambda s: f"p{s.p}-C{s.C}-tau{s.tau}-{s.expiry}")
def test_vi_matches_enumeration_of_all_policies(s):
    params = VIParams()
    res = value_iteration(s, params)
    best = brute_force_optimum(s)
    assert np.abs(res.values - best).max() <= 10 * params.epsilon


@pytest.mark.parametrize("p,C,tau", [
    ([1e-3, 1e-2, 1e-1], [1, 1, 2], 3),
    ([1e-3, 1e-2, 1e-1], [1, 1, 1], 4),
    ([0.05, 0.3], [2, 3], 3),
    ([0.2, 0.1], [1, 4], 4),
])
def test_vi_matches_policy_iteration(p, C, tau):
    s = scen(p, C, tau)
    assert state_space_size(s) <= 200
    params = VIParams()
    res = value_iteration(s, params)
    v_opt, _ = policy_iteration(s)
    assert np.abs(res.values - v_opt).max() <= 10 * params.epsilon


def test_policy_file_round_trip(tmp_path):
    s = scen([1e-3, 1e-2, 1e-1], [1, 1, 2], 5)
    params = VIParams()
    res = value_iteration(s, params)
    f1, f2 = tmp_path / "a.json", tmp_path / "b.json"
    save_policy(f1, res, s, params)
    save_policy(f2, value_iteration(s, params), s, params)
    assert f1.read_bytes() == f2.read_bytes()
    doc = load_policy(f1, s)
    assert np.array_equal(doc["actions"], res.policy)
    assert doc["iterations"] == res.iterations and doc["discount"] == s.discount
    with pytest.raises(FingerprintMismatch):
        load_policy(f1, s.replace(tau=6))
    bad = json.loads(f1.read_text())
    bad["version"] = 99
    f1.write_text(json.dumps(bad))
    with pytest.raises(ValueError):
        load_policy(f1)
