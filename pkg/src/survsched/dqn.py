"""Deep Q learning on the scheduling MDP with a small residual ReLU network.

The network, its backward pass and the Adam update are written directly in
numpy.  Training follows the usual online recipe: epsilon-greedy acting,
uniform replay, a frozen target copy synced periodically, and a squared TD
loss.  The environment may run with channel probabilities different from
the evaluation scenario (model-mismatch training).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ScenarioConfig, SystemState, build_kernel, decode_all, initial_state, state_index
from .schedulers import DecisionContext, Scheduler

log = logging.getLogger(__name__)

NETWORK_MAGIC = b"SSQN"
NETWORK_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetworkSpec:
    """Input layer, ``n_blocks`` two-layer residual blocks of constant width, output layer."""

    input_width: int
    width: int
    n_blocks: int
    output_width: int

    @classmethod
    def small(cls, n_agents: int) -> "NetworkSpec":
        # 3071 parameters for three agents
        return cls(2 * n_agents, 26, 2, n_agents)

    @classmethod
    def large(cls, n_agents: int) -> "NetworkSpec":
        # 22 linear layers, 25 553 parameters for three agents
        return cls(2 * n_agents, 35, 10, n_agents)

    @property
    def n_layers(self) -> int:
        return 2 + 2 * self.n_blocks

    def shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer in order."""
        out = [(self.input_width, self.width)]
        out += [(self.width, self.width)] * (2 * self.n_blocks)
        out.append((self.width, self.output_width))
        return out

    @property
    def parameter_count(self) -> int:
        return sum(i * o + o for i, o in self.shapes())


class QNetwork:
    """Residual MLP: ``h = relu(W0 x)``, ``h += W2 relu(W1 h)`` per block, ``q = Wout h``."""

    def __init__(self, spec: NetworkSpec, params: list[np.ndarray] | None = None, seed=0):
        self.spec = spec
        if params is None:
            params = self._init(np.random.default_rng(seed))
        self.params = params

    def _init(self, rng) -> list[np.ndarray]:
        params = []
        shapes = self.spec.shapes()
        for i, (fan_in, fan_out) in enumerate(shapes):
            W = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            if i == len(shapes) - 1:
                W *= 0.01
            elif i >= 1 and i % 2 == 0:
                # second layer of a block: keep the residual branch small at start
                W *= 0.1
            params += [W, np.zeros(fan_out)]
        return params

    def copy(self) -> "QNetwork":
        return QNetwork(self.spec, [p.copy() for p in self.params])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def forward(self, x: np.ndarray, keep: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.input_width:
            raise ValueError(f"expected {self.spec.input_width} features, got {x.shape[-1]}")
        P = self.params
        z = x @ P[0] + P[1]
        h = np.maximum(z, 0.0)
        cache = [(x, z)]
        for b in range(self.spec.n_blocks):
            W1, b1, W2, b2 = P[2 + 4 * b: 6 + 4 * b]
            u = h @ W1 + b1
            a = np.maximum(u, 0.0)
            cache.append((h, u, a))
            h = h + a @ W2 + b2
        q = h @ P[-2] + P[-1]
        cache.append(h)
        return (q, cache) if keep else q

    __call__ = forward

    def backward(self, dq: np.ndarray, cache) -> list[np.ndarray]:
        """Gradients of ``sum(dq * q)`` with respect to every parameter."""
        P = self.params
        grads = [None] * len(P)
        h = cache[-1]
        grads[-2] = h.T @ dq
        grads[-1] = dq.sum(axis=0)
        dh = dq @ P[-2].T
        for b in range(self.spec.n_blocks - 1, -1, -1):
            h_in, u, a = cache[1 + b]
            W1, W2 = P[2 + 4 * b], P[4 + 4 * b]
            grads[4 + 4 * b] = a.T @ dh
            grads[5 + 4 * b] = dh.sum(axis=0)
            du = (dh @ W2.T) * (u > 0)
            grads[2 + 4 * b] = h_in.T @ du
            grads[3 + 4 * b] = du.sum(axis=0)
            dh = dh + du @ W1.T
        x, z = cache[0]
        dz = dh * (z > 0)
        grads[0] = x.T @ dz
        grads[1] = dz.sum(axis=0)
        return grads


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= scale * m / (np.sqrt(v) + self.eps)


# --------------------------------------------------------------------------
# encoding and TD pieces


@dataclass(frozen=True)
class Encoder:
    """Frozen feature scaling: ``tau_rem / tau_scale`` and ``c_rem / C_k``."""

    tau_scale: float
    C: tuple

    @classmethod
    def for_scenario(cls, scenario: ScenarioConfig) -> "Encoder":
        return cls(float(scenario.tau), tuple(scenario.C))

    def __call__(self, tau_rem: np.ndarray, c_rem: np.ndarray) -> np.ndarray:
        tau_rem = np.asarray(tau_rem, dtype=float)
        c_rem = np.asarray(c_rem, dtype=float)
        feats = np.empty(tau_rem.shape[:-1] + (2 * tau_rem.shape[-1],))
        feats[..., 0::2] = tau_rem / self.tau_scale
        feats[..., 1::2] = c_rem / np.asarray(self.C, dtype=float)
        return feats


def encode_state(state: SystemState, encoder: Encoder) -> np.ndarray:
    arr = np.asarray([tuple(s) for s in state], dtype=float)
    if arr.shape[0] != len(encoder.C):
        raise ValueError("state and encoder disagree on the number of agents")
    return encoder(arr[:, 0], arr[:, 1])


def encode_all_states(scenario: ScenarioConfig, encoder: Encoder) -> np.ndarray:
    tau_rem, c_rem = decode_all(scenario)
    return encoder(tau_rem, c_rem)


def td_target(reward, next_q, discount: float):
    """``reward + discount * max(next_q)`` along the last axis."""
    return np.asarray(reward, dtype=float) + discount * np.max(np.asarray(next_q, dtype=float), axis=-1)


def td_error(q_estimate, q_target):
    return np.asarray(q_estimate, dtype=float) - np.asarray(q_target, dtype=float)


def td_loss_and_grad(net: QNetwork, feats: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean squared TD error over the batch and its parameter gradients."""
    q, cache = net.forward(feats, keep=True)
    rows = np.arange(len(actions))
    delta = td_error(q[rows, actions], targets)
    loss = float(np.mean(delta ** 2))
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * delta / len(actions)
    return loss, net.backward(dq, cache), q


# --------------------------------------------------------------------------
# replay and training


class ReplayBuffer:
    """Ring buffer of (state index, action, reward, next state index)."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.s = np.zeros(self.capacity, dtype=np.int64)
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros(self.capacity, dtype=np.int64)
        self.size = 0
        self._pos = 0

    def push(self, s: int, a: int, r: float, s2: int) -> None:
        i = self._pos
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.integers(0, self.size, size=batch)


@dataclass
class TrainConfig:
    training_p: tuple | None = None
    training_tau: int | None = None
    steps: int = 500_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5
    replay_capacity: int = 100_000
    target_sync: int = 1_000
    warmup: int = 1_000
    train_every: int = 1
    eval_every: int = 50_000
    network: str = "small"
    seed: int = 0
    divergence_slack: float = 10.0

    def __post_init__(self):
        if self.training_p is not None:
            self.training_p = tuple(float(p) for p in self.training_p)
        for name in ("eps_start", "eps_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.eps_decay_fraction <= 1.0:
            raise ValueError("eps_decay_fraction must lie in (0, 1]")
        if self.network not in ("small", "large"):
            raise ValueError("network must be 'small' or 'large'")
        if self.steps < 1 or self.batch_size < 1 or self.replay_capacity < 1 or self.target_sync < 1:
            raise ValueError("steps, batch_size, replay_capacity and target_sync must be positive")

    def epsilon(self, step: int) -> float:
        horizon = max(1, int(self.eps_decay_fraction * self.steps))
        frac = min(1.0, step / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def training_scenario(self, scenario: ScenarioConfig) -> ScenarioConfig:
        out = scenario
        if self.training_tau is not None:
            out = out.replace(tau=int(self.training_tau))
        if self.training_p is not None:
            out = out.with_p(self.training_p)
        return out


# channel settings of the two trained networks compared in the experiments
NN1_TRAINING_P = (1e-3, 1e-2, 1e-1)
NN2_TRAINING_P = (1e-2, 1e-1, 0.5)


def preset(name: str, **overrides) -> TrainConfig:
    """``nn1``: train on the true channels; ``nn2``: harsher mismatched channels. Both at tau=10."""
    table = {"nn1": NN1_TRAINING_P, "nn2": NN2_TRAINING_P}
    if name not in table:
        raise ValueError(f"unknown preset {name!r}")
    kw = dict(training_p=table[name], training_tau=10)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class TrainedNetwork:
    net: QNetwork
    encoder: Encoder
    discount: float
    training_fingerprint: str
    training_scenario: dict
    config: dict = field(default_factory=dict)

    def q_values(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward(features)


@dataclass
class LogRow:
    step: int
    loss: float
    epsilon: float
    eval_F: float | None


LOG_HEADER = ["step", "loss", "epsilon", "eval_F"]


def greedy_policy(trained: TrainedNetwork, scenario: ScenarioConfig) -> np.ndarray:
    """Greedy action of the network in every state of ``scenario``; lowest index wins ties."""
    if scenario.n_agents != trained.net.spec.output_width:
        raise ValueError(f"network has {trained.net.spec.output_width} outputs, scenario {scenario.n_agents} agents")
    feats = encode_all_states(scenario, trained.encoder)
    q = np.concatenate([trained.net.forward(chunk) for chunk in np.array_split(feats, max(1, len(feats) // 8192))])
    return np.argmax(q, axis=1)


def train(scenario: ScenarioConfig, config: TrainConfig, eval_scenario: ScenarioConfig | None = None,
          log_path=None, checkpoint_path=None, callback=None) -> tuple[TrainedNetwork, list[LogRow]]:
    """Train a Q network online against ``config.training_scenario(scenario)``.

    ``eval_scenario`` (default: ``scenario`` at the training tau) is used for
    the periodic exact failure-rate checkpoints.  Raises ``TrainingDiverged``
    when a Q estimate leaves ``[-(N/(1-lambda)) * slack, N/(1-lambda) * slack]``
    or the loss stops being finite; the last good network is written to
    ``checkpoint_path`` first when given.  ``callback(updates, net, target)``
    runs after every gradient update.
    """
    from .simulation import exact_failure_rate

    env = config.training_scenario(scenario)
    eval_scenario = eval_scenario if eval_scenario is not None else scenario.replace(tau=env.tau)
    kernel = build_kernel(env)
    eval_kernel = build_kernel(eval_scenario)
    encoder = Encoder.for_scenario(env)
    feats = encode_all_states(env, encoder)
    n = env.n_agents
    lam = env.discount
    bound = n / (1.0 - lam) * config.divergence_slack

    spec = NetworkSpec.small(n) if config.network == "small" else NetworkSpec.large(n)
    log.info("training %s network with %d parameters on %s", config.network, spec.parameter_count, env.canonical())
    rng = np.random.default_rng(config.seed)
    net = QNetwork(spec, seed=rng.integers(2**63))
    target = net.copy()
    opt = Adam(net.params, lr=config.learning_rate)
    replay = ReplayBuffer(config.replay_capacity)
    trained = TrainedNetwork(net, encoder, lam, env.fingerprint(), env.canonical(), asdict(config))

    nxt = kernel.next_index
    rew = kernel.reward
    p = np.asarray(env.p)
    s = state_index(initial_state(env), env)
    uniforms = rng.random
    rows: list[LogRow] = []
    losses = []
    updates = 0
    last_good = None
    for step in range(1, config.steps + 1):
        eps = config.epsilon(step)
        if uniforms() < eps:
            a = int(rng.integers(n))
        else:
            a = int(np.argmax(net.forward(feats[s])))
        o = 0 if uniforms() >= p[a] else 1
        s2 = int(nxt[s, a, o])
        replay.push(s, a, float(rew[s, a, o]), s2)
        s = s2

        if step >= config.warmup and step % config.train_every == 0:
            idx = replay.sample_indices(rng, config.batch_size)
            q_next = target.forward(feats[replay.s2[idx]])
            y = td_target(replay.r[idx], q_next, lam)
            loss, grads, q = td_loss_and_grad(net, feats[replay.s[idx]], replay.a[idx], y)
            if not math.isfinite(loss) or np.abs(q).max() > bound:
                if checkpoint_path is not None and last_good is not None:
                    save_network(checkpoint_path, last_good)
                raise TrainingDiverged(
                    f"step {step}: loss {loss:.3g}, max |Q| {np.abs(q).max():.3g} exceeds bound {bound:.3g}")
            opt.step(grads)
            losses.append(loss)
            updates += 1
            if updates % config.target_sync == 0:
                target = net.copy()
                last_good = TrainedNetwork(target, encoder, lam, env.fingerprint(), env.canonical(), asdict(config))
            if callback is not None:
                callback(updates, net, target)

        if step % config.eval_every == 0 or step == config.steps:
            eval_F = None
            try:
                eval_F = exact_failure_rate(eval_scenario, greedy_policy(trained, eval_scenario), eval_kernel)
            except ValueError as exc:
                log.warning("skipping evaluation at step %d: %s", step, exc)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            rows.append(LogRow(step, mean_loss, eps, eval_F))
            log.info("step %d loss %.4g eps %.3f eval F %s", step, mean_loss, eps, eval_F)
            losses = []

    if log_path is not None:
        write_log(log_path, rows)
    return trained, rows


def write_log(path, rows: Sequence[LogRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r.step, repr(r.loss), repr(r.epsilon), "" if r.eval_F is None else repr(r.eval_F)])


# --------------------------------------------------------------------------
# persistence and scheduling


def save_network(path, trained: TrainedNetwork) -> None:
    spec = trained.net.spec
    header = {
        "spec": asdict(spec),
        "parameter_count": spec.parameter_count,
        "encoder": {"tau_scale": trained.encoder.tau_scale, "C": list(trained.encoder.C)},
        "discount": trained.discount,
        "training_fingerprint": trained.training_fingerprint,
        "training_scenario": trained.training_scenario,
        "config": trained.config,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = trained.net.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(NETWORK_MAGIC)
        fh.write(struct.pack("<II", NETWORK_VERSION, len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_network(path) -> TrainedNetwork:
    raw = Path(path).read_bytes()
    if raw[:4] != NETWORK_MAGIC:
        raise ValueError(f"{path}: not a network file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != NETWORK_VERSION:
        raise ValueError(f"{path}: unsupported network file version {version}")
    header = json.loads(raw[12:12 + hlen])
    spec = NetworkSpec(**header["spec"])
    flat = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if flat.size != spec.parameter_count:
        raise ValueError(f"{path}: expected {spec.parameter_count} parameters, found {flat.size}")
    net = QNetwork(spec, seed=0)
    net.load_flat(flat.astype(float))
    enc = Encoder(float(header["encoder"]["tau_scale"]), tuple(header["encoder"]["C"]))
    return TrainedNetwork(net, enc, header["discount"], header["training_fingerprint"],
                          header["training_scenario"], header.get("config", {}))


def decide_dq(ctx: DecisionContext, trained: TrainedNetwork) -> int:
    q = trained.net.forward(encode_state(ctx.state, trained.encoder))
    return int(np.argmax(q))


class DQScheduler(Scheduler):
    """Greedy action of a trained network, tabulated over the evaluation state space."""

    name = "dq"

    def __init__(self, trained: TrainedNetwork):
        self.trained = trained

    def bind(self, scenario):
        if tuple(scenario.C) != tuple(self.trained.encoder.C):
            raise ValueError("network was trained for a different payload split")
        super().bind(scenario)
        self._actions = greedy_policy(self.trained, scenario)
        self._list = self._actions.tolist()
        return self

    def decide_index(self, s, slot, rng):
        return self._list[s]

    def decide(self, ctx):
        s = ctx.index if ctx.index is not None else state_index(ctx.state, self.scenario)
        return self._list[s]

    def as_policy(self):
        return self._actions.copy()
