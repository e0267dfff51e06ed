"""Scenario, state space and slot dynamics of the survival-time scheduling MDP.

One radio resource per slot is given to exactly one of ``N`` agents.  Each
agent carries a payload of ``C_k`` packets and a survival timer.  A state is
the per-agent pair ``(tau_rem, c_rem)``; ``tau_rem`` counts the slots left
before the agent is in survival-time failure and ``c_rem`` the packets still
missing from the current payload.

Two expiry rules are supported:

``"persistent"`` (default)
    The timer saturates at 0 and the agent records a failure (E1) in every
    slot it spends at 0, until a payload completes.  ``tau_rem`` ranges over
    ``[0, tau]`` and the state space has ``(tau + 1)**N * prod(C)`` points.
``"reset"``
    On expiry the agent records a single failure and its timer restarts at
    ``tau``; the value 0 is never observed.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

EXPIRY_MODES = ("persistent", "reset")
MAX_STATES = 2**40


@dataclass(frozen=True)
class AgentConfig:
    """Channel error probability ``p``, packets per payload ``C`` and packet size."""

    p: float
    C: int
    gamma: int = 1

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0) or math.isnan(self.p):
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if int(self.C) != self.C or self.C < 1:
            raise ValueError(f"C must be a positive integer, got {self.C}")
        if int(self.gamma) != self.gamma or self.gamma < 1:
            raise ValueError(f"gamma must be a positive integer, got {self.gamma}")

    @property
    def payload_size(self) -> int:
        return self.C * self.gamma


@dataclass(frozen=True)
class ScenarioConfig:
    agents: tuple[AgentConfig, ...]
    tau: int
    discount: float = 0.9
    seed: int = 0
    expiry: str = "persistent"

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if len(self.agents) < 1:
            raise ValueError("a scenario needs at least one agent")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if not (0.0 < self.discount < 1.0):
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be an unsigned integer, got {self.seed}")
        if self.expiry not in EXPIRY_MODES:
            raise ValueError(f"expiry must be one of {EXPIRY_MODES}, got {self.expiry!r}")

    @classmethod
    def from_lists(cls, p: Sequence[float], C: Sequence[int], tau: int, **kwargs) -> "ScenarioConfig":
        if len(p) != len(C):
            raise ValueError("p and C must have the same length")
        return cls(tuple(AgentConfig(float(pk), int(ck)) for pk, ck in zip(p, C)), tau, **kwargs)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def p(self) -> tuple[float, ...]:
        return tuple(a.p for a in self.agents)

    @property
    def C(self) -> tuple[int, ...]:
        return tuple(a.C for a in self.agents)

    def replace(self, **changes) -> "ScenarioConfig":
        kw = dict(agents=self.agents, tau=self.tau, discount=self.discount,
                  seed=self.seed, expiry=self.expiry)
        kw.update(changes)
        return ScenarioConfig(**kw)

    def with_p(self, p: Sequence[float]) -> "ScenarioConfig":
        if len(p) != self.n_agents:
            raise ValueError("need one probability per agent")
        agents = tuple(AgentConfig(float(pk), a.C, a.gamma) for pk, a in zip(p, self.agents))
        return self.replace(agents=agents)

    def canonical(self) -> dict:
        """Everything that shapes the dynamics; the seed is deliberately left out."""
        return {
            "agents": [{"p": float(a.p), "C": int(a.C), "gamma": int(a.gamma)} for a in self.agents],
            "tau": int(self.tau),
            "discount": float(self.discount),
            "expiry": self.expiry,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class AgentState(NamedTuple):
    tau_rem: int
    c_rem: int


SystemState = tuple  # tuple[AgentState, ...]


@dataclass(frozen=True)
class SlotEvents:
    packet_success: int | None = None
    payload_complete: int | None = None
    failures: frozenset = field(default_factory=frozenset)

    @property
    def reward(self) -> int:
        return -len(self.failures)


class TransitionBranch(NamedTuple):
    next_state: SystemState
    probability: float
    reward: int
    success: bool


def initial_state(scenario: ScenarioConfig) -> SystemState:
    return tuple(AgentState(scenario.tau, a.C) for a in scenario.agents)


def validate_state(state: SystemState, scenario: ScenarioConfig) -> None:
    if len(state) != scenario.n_agents:
        raise ValueError(f"state has {len(state)} agents, scenario has {scenario.n_agents}")
    lo = 1 if scenario.expiry == "reset" else 0
    for k, (st, a) in enumerate(zip(state, scenario.agents)):
        tau_rem, c_rem = st
        if not (lo <= tau_rem <= scenario.tau) or not (1 <= c_rem <= a.C):
            raise ValueError(f"agent {k} state {tuple(st)} out of bounds")


def step_dynamics(state: SystemState, action: int, success: bool,
                  scenario: ScenarioConfig) -> tuple[SystemState, SlotEvents, int]:
    """Apply one slot given the transmission outcome of the allocated agent.

    The packet outcome is applied first; an agent completing its payload is
    restored to ``(tau, C)`` and skips this slot's timer decrement.  Every
    other agent loses one slot of survival budget.
    """
    n = scenario.n_agents
    if not (0 <= action < n) or int(action) != action:
        raise ValueError(f"action must be an agent index in [0, {n}), got {action}")
    tau = scenario.tau
    nxt = [list(s) for s in state]
    packet = complete = None
    if success:
        packet = action
        nxt[action][1] -= 1
        if nxt[action][1] == 0:
            complete = action
            nxt[action] = [tau, scenario.agents[action].C]
    failures = []
    for k in range(n):
        if k == complete:
            continue
        if scenario.expiry == "persistent":
            nxt[k][0] = max(nxt[k][0] - 1, 0)
            if nxt[k][0] == 0:
                failures.append(k)
        else:
            nxt[k][0] -= 1
            if nxt[k][0] <= 0:
                failures.append(k)
                nxt[k][0] = tau
    events = SlotEvents(packet, complete, frozenset(failures))
    return tuple(AgentState(t, c) for t, c in nxt), events, events.reward


def transition_branches(state: SystemState, action: int,
                        scenario: ScenarioConfig) -> list[TransitionBranch]:
    """The two outcomes of allocating ``action``: success w.p. ``1 - p``, loss w.p. ``p``."""
    p = scenario.agents[action].p if 0 <= action < scenario.n_agents else None
    ok, _, r_ok = step_dynamics(state, action, True, scenario)
    bad, _, r_bad = step_dynamics(state, action, False, scenario)
    return [TransitionBranch(ok, 1.0 - p, r_ok, True), TransitionBranch(bad, p, r_bad, False)]


def state_space_size(scenario: ScenarioConfig) -> int:
    """Number of encodable states, ``(tau + 1)**N * prod(C)``."""
    size = (scenario.tau + 1) ** scenario.n_agents * math.prod(scenario.C)
    if size > MAX_STATES:
        raise ValueError(f"state space of {size} states exceeds the index range")
    return size


# The dense index covers every encodable state, so it doubles as the size of
# the value/policy tables.
reachable_space_size = state_space_size


def _radices(scenario: ScenarioConfig) -> list[int]:
    out = []
    for a in scenario.agents:
        out += [scenario.tau + 1, a.C]
    return out


def state_index(state: SystemState, scenario: ScenarioConfig) -> int:
    """Mixed-radix index; agent 0 is most significant and ``tau_rem`` precedes ``c_rem``.

    The initial state (all digits maximal) maps to ``state_space_size - 1``.
    """
    if len(state) != scenario.n_agents:
        raise ValueError("state/scenario agent count mismatch")
    idx = 0
    for (tau_rem, c_rem), a in zip(state, scenario.agents):
        if not (0 <= tau_rem <= scenario.tau and 1 <= c_rem <= a.C):
            raise ValueError(f"agent state {(tau_rem, c_rem)} out of bounds")
        idx = (idx * (scenario.tau + 1) + tau_rem) * a.C + (c_rem - 1)
    return idx


def state_from_index(index: int, scenario: ScenarioConfig) -> SystemState:
    size = state_space_size(scenario)
    if int(index) != index or not (0 <= index < size):
        raise ValueError(f"state index {index} outside [0, {size})")
    index = int(index)
    digits = []
    for a in reversed(scenario.agents):
        index, c0 = divmod(index, a.C)
        index, t = divmod(index, scenario.tau + 1)
        digits.append(AgentState(t, c0 + 1))
    return tuple(reversed(digits))


def decode_all(scenario: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(tau_rem, c_rem)`` arrays of shape ``(S, N)`` for every state index."""
    size = state_space_size(scenario)
    idx = np.arange(size, dtype=np.int64)
    n = scenario.n_agents
    tau_rem = np.empty((size, n), dtype=np.int64)
    c_rem = np.empty((size, n), dtype=np.int64)
    for k in range(n - 1, -1, -1):
        C = scenario.agents[k].C
        idx, c0 = np.divmod(idx, C)
        idx, t = np.divmod(idx, scenario.tau + 1)
        tau_rem[:, k] = t
        c_rem[:, k] = c0 + 1
    return tau_rem, c_rem


def encode_all(tau_rem: np.ndarray, c_rem: np.ndarray, scenario: ScenarioConfig) -> np.ndarray:
    idx = np.zeros(tau_rem.shape[:-1], dtype=np.int64)
    for k, a in enumerate(scenario.agents):
        idx = (idx * (scenario.tau + 1) + tau_rem[..., k]) * a.C + (c_rem[..., k] - 1)
    return idx


@dataclass(frozen=True)
class Kernel:
    """Tabulated transition structure of a scenario.

    ``next_index[s, a, o]`` and ``reward[s, a, o]`` give the successor and the
    slot reward for outcome ``o`` (0 = packet received, 1 = packet lost), which
    happens with probability ``prob[a, o]``.  ``failed[s, a, o, k]`` flags
    agent ``k`` recording E1 in that slot.
    """

    scenario: ScenarioConfig
    next_index: np.ndarray
    reward: np.ndarray
    prob: np.ndarray
    failed: np.ndarray

    @property
    def n_states(self) -> int:
        return self.next_index.shape[0]


def build_kernel(scenario: ScenarioConfig) -> Kernel:
    """Vectorised equivalent of ``step_dynamics`` over every (state, action, outcome)."""
    tau_rem, c_rem = decode_all(scenario)
    size, n = tau_rem.shape
    C = np.asarray(scenario.C, dtype=np.int64)
    tau = scenario.tau
    next_index = np.empty((size, n, 2), dtype=np.int64)
    reward = np.empty((size, n, 2), dtype=np.int64)
    failed = np.empty((size, n, 2, n), dtype=bool)
    for a in range(n):
        for o, success in enumerate((True, False)):
            t = tau_rem.copy()
            c = c_rem.copy()
            complete = np.zeros((size, n), dtype=bool)
            if success:
                c[:, a] -= 1
                done = c[:, a] == 0
                complete[:, a] = done
                c[done, a] = C[a]
                t[done, a] = tau
            live = ~complete
            if scenario.expiry == "persistent":
                t = np.where(live, np.maximum(t - 1, 0), t)
                fail = live & (t == 0)
            else:
                t = np.where(live, t - 1, t)
                fail = live & (t <= 0)
                t = np.where(fail, tau, t)
            next_index[:, a, o] = encode_all(t, c, scenario)
            failed[:, a, o] = fail
            reward[:, a, o] = -fail.sum(axis=1)
    p = np.asarray(scenario.p, dtype=float)
    prob = np.stack([1.0 - p, p], axis=1)
    return Kernel(scenario, next_index, reward, prob, failed)


def reachable_states(scenario: ScenarioConfig, kernel: Kernel | None = None,
                     policy: np.ndarray | None = None) -> np.ndarray:
    """Sorted indices reachable from the initial state.

    With ``policy`` only the chosen action is followed; otherwise all actions.
    Zero-probability outcomes are not followed.
    """
    kernel = kernel if kernel is not None else build_kernel(scenario)
    start = state_index(initial_state(scenario), scenario)
    seen = np.zeros(kernel.n_states, dtype=bool)
    seen[start] = True
    frontier = np.array([start])
    live_outcomes = kernel.prob > 0
    while frontier.size:
        if policy is None:
            nxt = kernel.next_index[frontier][:, live_outcomes]
        else:
            acts = np.asarray(policy)[frontier]
            nxt = kernel.next_index[frontier, acts][live_outcomes[acts]]
        nxt = np.unique(nxt)
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)


def failure_rate(failure_counts: Sequence[int], t: int) -> float:
    """Cumulative E1 count over elapsed slots; may exceed one."""
    if t < 1:
        raise ValueError("failure rate needs t >= 1")
    if any(v < 0 for v in failure_counts):
        raise ValueError("failure counts must be non-negative")
    return sum(failure_counts) / t
