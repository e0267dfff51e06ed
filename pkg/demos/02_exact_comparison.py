"""Exact long-run failure rates of every deterministic rule on one payload split.

No simulation noise here: each policy induces a Markov chain whose stationary
law gives the failure rate directly.  Change ``C`` to look at another split.
"""
import sys

from survsched.model import ScenarioConfig, build_kernel
from survsched.schedulers import OnLine, PriorityQueue
from survsched.simulation import exact_failure_rate
from survsched.solver import value_iteration

C = [int(c) for c in sys.argv[1]] if len(sys.argv) > 1 else [2, 2, 3]
base = ScenarioConfig.from_lists([1e-3, 1e-2, 1e-1], C, tau=3)

print(f"payload split {C}, discount {base.discount}")
print(f"{'tau':>4} {'states':>7} {'PQ':>10} {'OL':>10} {'VI':>10}")
for tau in range(3, 13):
    s = base.replace(tau=tau)
    k = build_kernel(s)
    rates = []
    for rule in (PriorityQueue("lowest"), OnLine("lowest")):
        rates.append(exact_failure_rate(s, rule.bind(s).as_policy(), k))
    rates.append(exact_failure_rate(s, value_iteration(s, kernel=k).policy, k))
    print(f"{tau:>4} {k.n_states:>7} " + " ".join(f"{r:>10.3e}" for r in rates))
