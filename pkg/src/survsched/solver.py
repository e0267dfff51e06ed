"""Value iteration and exact policy evaluation over the tabulated state space."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Kernel, ScenarioConfig, SystemState, build_kernel, state_index

log = logging.getLogger(__name__)

POLICY_FORMAT = "survsched-policy"
POLICY_VERSION = 1


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class VIParams:
    epsilon: float = 1e-6
    max_iterations: int = 10_000

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class VIResult:
    values: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float
    converged: bool
    deltas: list = field(default_factory=list)


def _kernel(scenario: ScenarioConfig, kernel: Kernel | None) -> Kernel:
    if kernel is None:
        return build_kernel(scenario)
    if kernel.scenario != scenario:
        raise ValueError("kernel was built for a different scenario")
    return kernel


def q_table(values: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Q(s, a) for every state and action, shape ``(S, N)``."""
    lam = kernel.scenario.discount
    target = kernel.reward + lam * values[kernel.next_index]
    return (target * kernel.prob[None, :, :]).sum(axis=2)


def q_value(state: SystemState, action: int, values: np.ndarray, scenario: ScenarioConfig,
            kernel: Kernel | None = None) -> float:
    kernel = _kernel(scenario, kernel)
    s = state_index(state, scenario)
    lam = scenario.discount
    out = 0.0
    for o in range(2):
        pr = kernel.prob[action, o]
        out += pr * (kernel.reward[s, action, o] + lam * values[kernel.next_index[s, action, o]])
    return float(out)


def greedy(q: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximiser: lowest agent index wins ties
    return np.argmax(q, axis=1)


def extract_policy(values: np.ndarray, scenario: ScenarioConfig, kernel: Kernel | None = None) -> np.ndarray:
    kernel = _kernel(scenario, kernel)
    return greedy(q_table(np.asarray(values, dtype=float), kernel))


def value_iteration(scenario: ScenarioConfig, params: VIParams = VIParams(),
                    kernel: Kernel | None = None) -> VIResult:
    """Iterate the Bellman optimality operator from ``v = 0``.

    Stops once the sup-norm change drops below ``params.epsilon``.  Hitting
    ``max_iterations`` first returns the last iterate with ``converged=False``.
    """
    kernel = _kernel(scenario, kernel)
    v = np.zeros(kernel.n_states)
    deltas = []
    converged = False
    it = 0
    while it < params.max_iterations:
        v_new = q_table(v, kernel).max(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        deltas.append(delta)
        v = v_new
        it += 1
        if delta < params.epsilon:
            converged = True
            break
    if not converged:
        log.warning("value iteration stopped after %d sweeps, residual %.3g", it, deltas[-1])
    policy = greedy(q_table(v, kernel))
    return VIResult(v, policy, it, deltas[-1], converged, deltas)


def policy_value_exact(policy: np.ndarray, scenario: ScenarioConfig, params: VIParams = VIParams(),
                       kernel: Kernel | None = None) -> np.ndarray:
    """Fixed point of ``v = r_pi + lambda * P_pi v`` by iterative policy evaluation."""
    kernel = _kernel(scenario, kernel)
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (kernel.n_states,):
        raise ValueError(f"policy must have shape ({kernel.n_states},)")
    rows = np.arange(kernel.n_states)
    nxt = kernel.next_index[rows, policy]
    rew = kernel.reward[rows, policy]
    pr = kernel.prob[policy]
    r_pi = (pr * rew).sum(axis=1)
    lam = scenario.discount
    v = np.zeros(kernel.n_states)
    for it in range(params.max_iterations):
        v_new = r_pi + lam * (pr * v[nxt]).sum(axis=1)
        delta = float(np.max(np.abs(v_new - v)))
        v = v_new
        if delta < params.epsilon:
            return v
    log.warning("policy evaluation stopped after %d sweeps, residual %.3g", params.max_iterations, delta)
    return v


def save_policy(path, result: VIResult, scenario: ScenarioConfig, params: VIParams) -> None:
    doc = {
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "fingerprint": scenario.fingerprint(),
        "scenario": scenario.canonical(),
        "discount": scenario.discount,
        "epsilon": params.epsilon,
        "iterations": result.iterations,
        "residual": result.residual,
        "converged": result.converged,
        "actions": [int(a) for a in result.policy],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_policy(path, scenario: ScenarioConfig | None = None) -> dict:
    """Read a policy file; with ``scenario`` given, refuse a fingerprint mismatch."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != POLICY_FORMAT or doc.get("version") != POLICY_VERSION:
        raise ValueError(f"{path}: not a version {POLICY_VERSION} policy file")
    if scenario is not None and doc["fingerprint"] != scenario.fingerprint():
        raise FingerprintMismatch(
            f"{path}: policy fingerprint {doc['fingerprint']} does not match scenario {scenario.fingerprint()}")
    doc["actions"] = np.asarray(doc["actions"], dtype=np.int64)
    return doc
