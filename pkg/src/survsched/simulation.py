"""Monte Carlo episodes, the exact stationary-chain oracle, and tau sweeps."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (Kernel, ScenarioConfig, build_kernel, initial_state, reachable_states,
                    state_from_index, state_index)
from .schedulers import RandomStream, Scheduler

log = logging.getLogger(__name__)

CSV_HEADER = ["scenario", "scheduler", "tau", "horizon", "seed", "failures_total", "F", "stderr"]
EXACT_STATE_LIMIT = 100_000


@dataclass
class EpisodeMetrics:
    horizon: int
    failures_per_agent: list
    seed: int
    e0_counts: list
    packets_sent: list
    final_state: tuple
    e1_timeline: list | None = None

    @property
    def failures_total(self) -> int:
        return int(sum(self.failures_per_agent))

    @property
    def failure_rate(self) -> float:
        return self.failures_total / self.horizon

    @property
    def stderr(self) -> float:
        return math.sqrt(self.failure_rate / self.horizon)


class _Tables:
    """Flat Python lists indexed by ``(s * N + a) * 2 + o``; list indexing beats numpy per element."""

    def __init__(self, kernel: Kernel):
        n = kernel.scenario.n_agents
        self.next = kernel.next_index.reshape(-1).tolist()
        weights = 1 << np.arange(n)
        self.code = (kernel.failed * weights).sum(axis=-1).reshape(-1).tolist()


def run_episode(scenario: ScenarioConfig, scheduler: Scheduler, horizon: int, seed: int | None = None,
                kernel: Kernel | None = None, diagnostics: bool = False) -> EpisodeMetrics:
    """Simulate ``horizon`` consecutive slots from the initial state.

    One random stream serves both the scheduler and the channel draws, so a
    fixed seed fixes the whole trajectory.  With ``diagnostics`` the slot
    index and failing agents of every E1 are kept in ``e1_timeline``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seed = scenario.seed if seed is None else seed
    kernel = kernel if kernel is not None else build_kernel(scenario)
    tables = _Tables(kernel)
    scheduler.bind(scenario)
    scheduler.reset()
    rng = RandomStream(seed)
    n = scenario.n_agents
    p = list(scenario.p)
    nxt, code = tables.next, tables.code
    decide = scheduler.decide_index
    uniform = rng.uniform

    s = state_index(initial_state(scenario), scenario)
    hist = [0] * (1 << n)
    sent = [0] * n
    timeline = [] if diagnostics else None
    for t in range(horizon):
        a = decide(s, t, rng)
        o = 0 if uniform() >= p[a] else 1
        if o == 0:
            sent[a] += 1
        j = ((s * n + a) << 1) + o
        c = code[j]
        if c:
            hist[c] += 1
            if diagnostics:
                timeline.append((t, tuple(k for k in range(n) if c >> k & 1)))
        s = nxt[j]

    fails = [sum(h for c, h in enumerate(hist) if c >> k & 1) for k in range(n)]
    final = state_from_index(s, scenario)
    C = scenario.C
    # packets of the unfinished payload are C - c_rem
    e0 = [(sent[k] - (C[k] - final[k].c_rem)) // C[k] for k in range(n)]
    return EpisodeMetrics(horizon, fails, seed, e0, sent, final, timeline)


def _class_law(P, members: np.ndarray) -> np.ndarray:
    import scipy.sparse as sp
    from scipy.sparse.linalg import spsolve

    if members.size == 1:
        return np.ones(1)
    Q = (P[members][:, members].T - sp.identity(members.size)).tolil()
    # one balance equation is redundant; swap it for the normalisation
    Q[0, :] = np.ones(members.size)
    b = np.zeros(members.size)
    b[0] = 1.0
    pi = np.clip(spsolve(Q.tocsc(), b), 0.0, None)
    return pi / pi.sum()


def _closed_class_guess(P, start: int) -> np.ndarray:
    """Limiting law from ``start`` via closed classes and absorption probabilities."""
    import scipy.sparse as sp
    from scipy.sparse.csgraph import connected_components
    from scipy.sparse.linalg import spsolve

    P = sp.csr_matrix(P)
    n = P.shape[0]
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    A = P.tocoo()
    crossing = (labels[A.row] != labels[A.col]) & (A.data > 0)
    leaks = np.zeros(n_comp, dtype=bool)
    leaks[labels[A.row[crossing]]] = True
    closed = np.flatnonzero(~leaks)
    x = np.zeros(n)
    if not leaks[labels[start]]:
        members = np.flatnonzero(labels == labels[start])
        x[members] = _class_law(P, members)
        return x
    transient = np.flatnonzero(leaks[labels])
    # expected visits to each transient state before absorption, starting at ``start``
    PTT = P[transient][:, transient]
    e = np.zeros(transient.size)
    e[np.searchsorted(transient, start)] = 1.0
    visits = spsolve((sp.identity(transient.size) - PTT).T.tocsc(), e)
    flow = sp.csr_matrix(visits) @ P[transient]
    flow = np.asarray(flow.todense()).ravel()
    for c in closed:
        members = np.flatnonzero(labels == c)
        weight = flow[members].sum()
        if weight > 0:
            x[members] += weight * _class_law(P, members)
    return x / x.sum()


def stationary_distribution(P, start: int, tol: float = 1e-12, max_iter: int = 200_000,
                            damping: float = 0.5) -> np.ndarray:
    """Power iteration on the lazy chain ``damping*I + (1-damping)*P``.

    The lazy chain shares the stationary law of ``P`` and is aperiodic, so the
    iteration converges even when ``P`` is periodic.  It is seeded with the
    limiting law from ``start`` obtained by direct sparse solves (per closed
    class, weighted by absorption probability), so only round-off remains to
    polish.  Residual is the L1 norm of ``xP - x``.
    """
    n = P.shape[0]
    PT = P.T.tocsr()
    x = _closed_class_guess(P, start) if n > 1 else np.ones(1)
    resid = np.abs(PT @ x - x).sum()
    it = 0
    while resid >= tol:
        if it >= max_iter:
            raise RuntimeError(f"power iteration did not reach residual {tol} (last {resid:.3g})")
        x = damping * x + (1.0 - damping) * (PT @ x)
        x /= x.sum()
        resid = np.abs(PT @ x - x).sum()
        it += 1
    return x


def exact_failure_rate(scenario: ScenarioConfig, policy, kernel: Kernel | None = None,
                       max_states: int = EXACT_STATE_LIMIT, tol: float = 1e-12) -> float:
    """Long-run failures per slot of a deterministic policy, from the induced chain.

    Restricted to states reachable from the initial state under ``policy``.
    """
    import scipy.sparse as sp

    kernel = kernel if kernel is not None else build_kernel(scenario)
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (kernel.n_states,):
        raise ValueError("policy must cover the state space")
    states = reachable_states(scenario, kernel, policy)
    if states.size > max_states:
        raise ValueError(f"{states.size} reachable states exceed the exact-oracle bound {max_states}")
    local = np.full(kernel.n_states, -1, dtype=np.int64)
    local[states] = np.arange(states.size)
    acts = policy[states]
    nxt = local[kernel.next_index[states, acts]]  # (M, 2)
    pr = kernel.prob[acts]
    m = states.size
    rows = np.repeat(np.arange(m), 2)
    P = sp.csr_matrix((pr.reshape(-1), (rows, nxt.reshape(-1))), shape=(m, m))
    start = local[state_index(initial_state(scenario), scenario)]
    pi = stationary_distribution(P, start, tol=tol)
    expected_fail = -(pr * kernel.reward[states, acts]).sum(axis=1)
    return float(pi @ expected_fail)


@dataclass
class SweepRow:
    scenario: str
    scheduler: str
    tau: int
    horizon: int
    seed: int
    failures_total: int | None
    F: float | None
    stderr: float | None
    error: str | None = None

    def as_csv(self) -> list:
        if self.error is not None:
            return [self.scenario, self.scheduler, self.tau, self.horizon, self.seed, "", f"ERROR: {self.error}", ""]
        return [self.scenario, self.scheduler, self.tau, self.horizon, self.seed,
                self.failures_total, repr(self.F), repr(self.stderr)]


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def extend(self, other: "SweepResult") -> None:
        self.rows.extend(other.rows)

    def lookup(self, scheduler: str, tau: int) -> list:
        return [r for r in self.rows if r.scheduler == scheduler and r.tau == tau]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(r.as_csv())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _run_cell(job):
    scenario_id, sched_id, scenario, factory, horizon, seed = job
    try:
        sched = factory(scenario)
        m = run_episode(scenario, sched, horizon, seed)
        return SweepRow(scenario_id, sched_id, scenario.tau, horizon, seed, m.failures_total,
                        m.failure_rate, m.stderr)
    except Exception as exc:  # one bad cell must not sink the sweep
        log.error("cell %s/%s tau=%d seed=%d failed: %s", scenario_id, sched_id, scenario.tau, seed, exc)
        return SweepRow(scenario_id, sched_id, scenario.tau, horizon, seed, None, None, None, str(exc))


def sweep(base: ScenarioConfig, schedulers: dict, tau_grid, horizon: int, seeds,
          scenario_id: str = "", workers: int = 1) -> SweepResult:
    """Run every (scheduler, tau, seed) cell.

    ``schedulers`` maps an identifier to a factory ``f(scenario) -> Scheduler``;
    factories for solved policies should re-solve per tau since the state
    space depends on it.  Rows come back in (scheduler, tau, seed) order.
    """
    jobs = []
    for sched_id, factory in schedulers.items():
        for tau in tau_grid:
            scen = base.replace(tau=int(tau))
            for seed in seeds:
                jobs.append((scenario_id, sched_id, scen, factory, horizon, int(seed)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    return SweepResult(rows)
