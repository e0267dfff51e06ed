"""Allocation rules: Round-Robin, Priority-Queue, On-Line, tabulated policies.

Every scheduler answers ``decide(ctx)`` with an agent index.  For speed the
simulator works on dense state indices, so the state-only schedulers
tabulate their candidate set once per scenario and only draw from the
episode's random stream to break ties.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ScenarioConfig, SystemState, decode_all, state_index, state_space_size
from .solver import FingerprintMismatch, load_policy


class RandomStream:
    """Seeded uniform stream, drawn from numpy in blocks to keep per-slot cost low."""

    def __init__(self, seed, block: int = 1 << 16):
        self._gen = np.random.default_rng(seed)
        self._block = block
        self._buf: list = []
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def index(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> list[int]:
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.index(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass
class DecisionContext:
    state: SystemState | None
    slot: int
    rng: RandomStream
    index: int | None = None


def ol_heuristic(tau_rem, c_rem, p):
    """Failure estimate ``p ** (tau_rem / c_rem)``; zero for a perfect channel."""
    p = np.asarray(p, dtype=float)
    expo = np.asarray(tau_rem, dtype=float) / np.asarray(c_rem, dtype=float)
    out = np.where(p > 0, np.power(np.where(p > 0, p, 1.0), expo), 0.0)
    return float(out) if out.ndim == 0 else out


def _best(keys: Sequence[np.ndarray], rtol: float = 1e-12) -> np.ndarray:
    """Mask of lexicographic maximisers over the last axis; near-equal floats tie."""
    mask = np.ones(keys[0].shape, dtype=bool)
    for key in keys:
        k = np.where(mask, key, -np.inf)
        top = k.max(axis=-1, keepdims=True)
        mask &= k >= top - rtol * np.abs(top)
    return mask


def pq_keys(tau_rem: np.ndarray, c_rem: np.ndarray, scenario: ScenarioConfig) -> list[np.ndarray]:
    return [-np.asarray(tau_rem, dtype=float)]


def ol_keys(tau_rem: np.ndarray, c_rem: np.ndarray, scenario: ScenarioConfig) -> list[np.ndarray]:
    """Ranking keys of the On-Line rule for states given as ``(..., N)`` arrays.

    The primary key is the estimated probability that no agent fails after
    the slot, ``prod_j (1 - f_j')``, where ``f_j'`` re-evaluates the
    heuristic on the post-slot state: one slot less for every agent, one
    packet less for the served agent (a fresh payload and full timer when
    that packet completes it).  The served packet is assumed received.
    Ties go to the agent with the largest current estimate.
    """
    t = np.asarray(tau_rem, dtype=float)
    c = np.asarray(c_rem, dtype=float)
    p = np.asarray(scenario.p, dtype=float)
    C = np.asarray(scenario.C, dtype=float)
    t_next = np.maximum(t - 1.0, 0.0)
    f_idle = ol_heuristic(t_next, c, p)
    f_served = np.where(c > 1, ol_heuristic(t_next, np.maximum(c - 1.0, 1.0), p),
                        ol_heuristic(np.broadcast_to(float(scenario.tau), t.shape), C, p))
    survive_idle = 1.0 - f_idle
    n = t.shape[-1]
    survive = np.empty_like(t)
    for k in range(n):
        others = np.prod(np.delete(survive_idle, k, axis=-1), axis=-1)
        survive[..., k] = others * (1.0 - f_served[..., k])
    return [survive, ol_heuristic(t, c, p)]


def _state_arrays(state: SystemState) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray([tuple(s) for s in state], dtype=float)
    return arr[:, 0], arr[:, 1]


def _pick(candidates: Sequence[int], rng: RandomStream | None) -> int:
    if len(candidates) == 1 or rng is None:
        return int(candidates[0])
    return int(candidates[rng.index(len(candidates))])


def pq_candidates(state: SystemState, scenario: ScenarioConfig | None = None) -> list[int]:
    t, c = _state_arrays(state)
    return np.flatnonzero(_best(pq_keys(t, c, scenario))).tolist()


def ol_candidates(state: SystemState, scenario: ScenarioConfig) -> list[int]:
    t, c = _state_arrays(state)
    return np.flatnonzero(_best(ol_keys(t, c, scenario))).tolist()


def decide_priority_queue(ctx: DecisionContext) -> int:
    """Agent with the fewest remaining survival slots, random among ties."""
    return _pick(pq_candidates(ctx.state), ctx.rng)


def decide_on_line(ctx: DecisionContext, scenario: ScenarioConfig) -> int:
    """Agent whose service minimises the estimated global failure probability."""
    return _pick(ol_candidates(ctx.state, scenario), ctx.rng)


class Scheduler:
    name = "base"

    def bind(self, scenario: ScenarioConfig) -> "Scheduler":
        """Prepare for episodes on ``scenario``; returns self."""
        self.scenario = scenario
        return self

    def reset(self) -> None:
        pass

    def decide(self, ctx: DecisionContext) -> int:
        raise NotImplementedError

    def decide_index(self, s: int, slot: int, rng: RandomStream) -> int:
        return self.decide(DecisionContext(None, slot, rng, s))

    def as_policy(self) -> np.ndarray | None:
        """Deterministic state-to-action table, if this rule has one."""
        return None


class RoundRobin(Scheduler):
    """Serves agents along a random permutation, redrawn after every N slots."""

    name = "rr"

    def __init__(self, buffer: Sequence[int] | None = None):
        self._initial = list(buffer) if buffer is not None else None
        self.buffer: list[int] = []
        self.cursor = 0

    def bind(self, scenario):
        super().bind(scenario)
        if self._initial is not None and sorted(self._initial) != list(range(scenario.n_agents)):
            raise ValueError("round-robin buffer must be a permutation of the agent indices")
        self.reset()
        return self

    def reset(self):
        self.buffer = list(self._initial) if self._initial is not None else []
        self.cursor = 0

    def decide(self, ctx):
        if self.cursor >= len(self.buffer):
            self.buffer = ctx.rng.permutation(self.scenario.n_agents)
            self.cursor = 0
        a = self.buffer[self.cursor]
        self.cursor += 1
        return a

    def decide_index(self, s, slot, rng):
        return self.decide(DecisionContext(None, slot, rng, s))


class _TabulatedChoice(Scheduler):
    """State-only rule with random tie-breaks; ``tie_break='lowest'`` makes it deterministic."""

    def __init__(self, tie_break: str = "random"):
        if tie_break not in ("random", "lowest"):
            raise ValueError("tie_break must be 'random' or 'lowest'")
        self.tie_break = tie_break

    keys = staticmethod(pq_keys)

    def bind(self, scenario):
        super().bind(scenario)
        tau_rem, c_rem = decode_all(scenario)
        best = _best(self.keys(tau_rem, c_rem, scenario))
        self._first = np.argmax(best, axis=1)
        self._cands = [tuple(np.flatnonzero(row)) for row in best] if self.tie_break == "random" else None
        self._first_list = self._first.tolist()
        return self

    def decide_index(self, s, slot, rng):
        if self._cands is None:
            return self._first_list[s]
        c = self._cands[s]
        if len(c) == 1:
            return int(c[0])
        return int(c[rng.index(len(c))])

    def decide(self, ctx):
        s = ctx.index if ctx.index is not None else state_index(ctx.state, self.scenario)
        return self.decide_index(s, ctx.slot, ctx.rng)

    def as_policy(self):
        return self._first.copy() if self.tie_break == "lowest" else None


class PriorityQueue(_TabulatedChoice):
    name = "pq"
    keys = staticmethod(pq_keys)


class OnLine(_TabulatedChoice):
    name = "ol"
    keys = staticmethod(ol_keys)


class FixedPolicy(Scheduler):
    """Looks the action up in a precomputed state-indexed table."""

    name = "vi"

    def __init__(self, actions: np.ndarray, fingerprint: str | None = None):
        self.actions = np.asarray(actions, dtype=np.int64)
        self.fingerprint = fingerprint

    @classmethod
    def from_file(cls, path) -> "FixedPolicy":
        doc = load_policy(path)
        return cls(doc["actions"], doc["fingerprint"])

    def bind(self, scenario):
        if self.fingerprint is not None and self.fingerprint != scenario.fingerprint():
            raise FingerprintMismatch(
                f"policy fingerprint {self.fingerprint} does not match scenario {scenario.fingerprint()}")
        if self.actions.shape != (state_space_size(scenario),):
            raise ValueError("policy table does not cover the scenario state space")
        if self.actions.min() < 0 or self.actions.max() >= scenario.n_agents:
            raise ValueError("policy contains out-of-range actions")
        super().bind(scenario)
        self._list = self.actions.tolist()
        return self

    def decide_index(self, s, slot, rng):
        return self._list[s]

    def decide(self, ctx):
        s = ctx.index if ctx.index is not None else state_index(ctx.state, self.scenario)
        return self._list[s]

    def as_policy(self):
        return self.actions.copy()


def decide_round_robin(ctx: DecisionContext, buffer: RoundRobin) -> int:
    return buffer.decide(ctx)


def decide_fixed_policy(ctx: DecisionContext, policy: FixedPolicy) -> int:
    return policy.decide(ctx)


def make_scheduler(kind: str, path=None, tie_break: str = "random") -> Scheduler:
    """Build a scheduler from its identifier: rr, pq, ol, vi (policy file) or dq (network file)."""
    if kind == "rr":
        return RoundRobin()
    if kind == "pq":
        return PriorityQueue(tie_break)
    if kind == "ol":
        return OnLine(tie_break)
    if kind == "vi":
        if path is None:
            raise ValueError("the vi scheduler needs a policy file")
        return FixedPolicy.from_file(path)
    if kind == "dq":
        if path is None:
            raise ValueError("the dq scheduler needs a network file")
        from .dqn import DQScheduler, load_network
        return DQScheduler(load_network(path))
    raise ValueError(f"unknown scheduler {kind!r}")
