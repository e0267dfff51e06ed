import numpy as np
import pytest

from survsched.dqn import (Adam, DQScheduler, Encoder, NetworkSpec, QNetwork, ReplayBuffer, TrainConfig,
                           TrainedNetwork, TrainingDiverged, decide_dq, encode_all_states, encode_state,
                           load_network, preset, save_network, td_error, td_loss_and_grad, td_target, train)
from survsched.model import AgentState as S
from survsched.model import ScenarioConfig, initial_state
from survsched.schedulers import DecisionContext, RandomStream


def scen(p, C, tau, **kw):
    return ScenarioConfig.from_lists(p, C, tau, **kw)


S223 = scen([1e-3, 1e-2, 1e-1], [2, 2, 3], 10)


def test_network_sizes():
    small, large = NetworkSpec.small(3), NetworkSpec.large(3)
    assert small.parameter_count == QNetwork(small).flat().size
    assert 2500 <= small.parameter_count <= 3500
    assert large.n_layers == 22
    assert 24_000 <= large.parameter_count <= 27_000


def test_encoder_examples():
    enc = Encoder.for_scenario(S223)
    feats = encode_state((S(10, 2), S(5, 1), S(3, 3)), enc)
    assert feats == pytest.approx([1.0, 1.0, 0.5, 0.5, 0.3, 1.0])
    assert encode_state(initial_state(S223), enc) == pytest.approx(np.ones(6))
    later = S223.replace(tau=12)
    assert encode_state(initial_state(later), enc)[0] == pytest.approx(1.2)
    with pytest.raises(ValueError):
        encode_state((S(1, 1),), enc)


def test_fresh_network_outputs_finite_and_small():
    net = QNetwork(NetworkSpec.small(3), seed=4)
    q = net.forward(encode_all_states(S223, Encoder.for_scenario(S223)))
    assert np.isfinite(q).all() and np.abs(q).max() < 0.5
    x = np.full(6, 0.3)
    assert np.array_equal(net.forward(x), net.forward(x))
    with pytest.raises(ValueError):
        net.forward(np.ones(5))


@pytest.mark.parametrize("spec", [NetworkSpec.small(3), NetworkSpec(4, 7, 3, 2)])
def test_gradients_match_finite_differences(spec):
    rng = np.random.default_rng(0)
    net = QNetwork(spec, seed=1)
    for p in net.params:
        p += rng.normal(0, 0.1, p.shape)  # leave the special init so every path carries gradient
    x = rng.random((5, spec.input_width))
    a = rng.integers(0, spec.output_width, 5)
    y = rng.normal(size=5)
    _, grads, _ = td_loss_and_grad(net, x, a, y)
    h = 1e-5
    worst = 0.0
    for p, g in zip(net.params, grads):
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = td_loss_and_grad(net, x, a, y)[0]
            p[i] = old - h
            down = td_loss_and_grad(net, x, a, y)[0]
            p[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-7))
    assert worst <= 1e-4


def test_td_target_and_error():
    assert td_target(-1, [-2, -3, -5], 0.95) == pytest.approx(-2.9)
    assert td_target(-1, [-2, -3], 0.0) == pytest.approx(-1)
    assert td_target(-2, [0, 0, 0], 0.9) == pytest.approx(-2)
    assert td_error(-2.9, -2.9) == 0
    assert td_error(-1.0, -2.9) == pytest.approx(1.9)


def test_loss_gradient_vanishes_at_zero_error():
    net = QNetwork(NetworkSpec.small(2), seed=2)
    x = np.random.default_rng(1).random((8, 4))
    a = np.arange(8) % 2
    y = net.forward(x)[np.arange(8), a]
    loss, grads, _ = td_loss_and_grad(net, x, a, y)
    assert loss == 0 and all(np.abs(g).max() == 0 for g in grads)


def test_adam_minimises_quadratic():
    w = [np.array([3.0, -2.0])]
    opt = Adam(w, lr=0.1)
    for _ in range(500):
        opt.step([2 * w[0]])
    assert np.abs(w[0]).max() < 1e-2


def test_replay_sampling_uniform_and_reproducible():
    buf = ReplayBuffer(50)
    for i in range(80):
        buf.push(i, 0, 0.0, i + 1)
    assert buf.size == 50 and set(buf.s) == set(range(30, 80))
    a = buf.sample_indices(np.random.default_rng(3), 20_000)
    b = buf.sample_indices(np.random.default_rng(3), 20_000)
    assert np.array_equal(a, b)
    counts = np.bincount(a, minlength=50)
    assert counts.min() > 300 and counts.max() < 500


def test_epsilon_schedule():
    cfg = TrainConfig(steps=1000)
    eps = [cfg.epsilon(t) for t in range(0, 1001)]
    assert eps[0] == 1.0 and eps[500] == pytest.approx(0.05) and eps[-1] == pytest.approx(0.05)
    assert all(0 <= e <= 1 for e in eps)
    with pytest.raises(ValueError):
        TrainConfig(eps_end=1.5)


def test_presets():
    assert preset("nn1").training_p == (1e-3, 1e-2, 1e-1) and preset("nn1").training_tau == 10
    assert preset("nn2").training_p == (1e-2, 1e-1, 0.5)
    env = preset("nn2").training_scenario(S223.replace(tau=8))
    assert env.p == (1e-2, 1e-1, 0.5) and env.tau == 10 and env.C == S223.C
    with pytest.raises(ValueError):
        preset("nn3")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_state_environment_learns_closed_form(seed):
    s = scen([0.5], [1], 1, discount=0.9)
    cfg = TrainConfig(steps=15_000, target_sync=250, eval_every=15_000, seed=seed)
    trained, _ = train(s, cfg)
    q = trained.net.forward(encode_all_states(s, trained.encoder))
    assert q == pytest.approx(-5.0, rel=0.1)


def test_target_network_frozen_between_syncs():
    s = scen([0.1, 0.3], [1, 2], 3)
    seen = {}

    def watch(updates, net, target):
        seen.setdefault((updates - 1) // 100, set()).add(target.flat().tobytes())

    train(s, TrainConfig(steps=700, warmup=64, target_sync=100, eval_every=700, seed=0), callback=watch)
    # the update that triggers a sync belongs to the previous window
    for window, digests in seen.items():
        assert len(digests) <= 2
    assert len(set().union(*seen.values())) >= 5


def test_divergence_aborts_training(tmp_path):
    s = scen([0.5, 0.5], [1, 1], 2)
    cfg = TrainConfig(steps=5_000, warmup=64, target_sync=50, learning_rate=5.0, divergence_slack=1.0,
                      eval_every=5_000, seed=0)
    ck = tmp_path / "ck.bin"
    with pytest.raises(TrainingDiverged):
        train(s, cfg, checkpoint_path=ck)


def test_training_log_and_network_file(tmp_path):
    s = scen([0.05, 0.2], [1, 2], 3)
    log = tmp_path / "log.csv"
    trained, rows = train(s, TrainConfig(steps=2000, eval_every=1000, seed=5), log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == "step,loss,epsilon,eval_F" and len(lines) == 3
    assert rows[-1].eval_F is not None

    path = tmp_path / "net.bin"
    save_network(path, trained)
    back = load_network(path)
    x = encode_all_states(s, trained.encoder)
    assert np.array_equal(back.net.forward(x), trained.net.forward(x))
    assert back.training_fingerprint == s.fingerprint() and back.discount == s.discount
    raw = path.read_bytes()
    assert raw[:4] == b"SSQN"
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_network(path)


def test_seed_changes_log_not_format(tmp_path):
    s = scen([0.05, 0.2], [1, 2], 3)
    a, ra = train(s, TrainConfig(steps=1500, eval_every=1500, seed=1))
    b, rb = train(s, TrainConfig(steps=1500, eval_every=1500, seed=2))
    assert ra[0].loss != rb[0].loss
    save_network(tmp_path / "a.bin", a)
    save_network(tmp_path / "b.bin", b)
    assert (tmp_path / "a.bin").stat().st_size == (tmp_path / "b.bin").stat().st_size


def _constant_net(values):
    spec = NetworkSpec(6, 4, 1, 3)
    net = QNetwork(spec, seed=0)
    for p in net.params:
        p[...] = 0.0
    net.params[-1][...] = values
    return TrainedNetwork(net, Encoder.for_scenario(S223), 0.9, S223.fingerprint(), S223.canonical())


def test_decide_dq_greedy_lowest_index():
    ctx = DecisionContext(initial_state(S223), 0, RandomStream(0))
    assert decide_dq(ctx, _constant_net([-1.0, -2.0, -3.0])) == 0
    assert decide_dq(ctx, _constant_net([-2.0, -1.0, -1.0])) == 1
    sched = DQScheduler(_constant_net([-3.0, -1.0, -2.0])).bind(S223.replace(tau=12))
    assert set(sched.as_policy()) == {1}


def test_dq_scheduler_rejects_agent_mismatch():
    with pytest.raises(ValueError):
        DQScheduler(_constant_net([0.0, 0.0, 0.0])).bind(scen([0.1, 0.1], [2, 2], 10))
