"""A shortened Monte Carlo sweep and the ordering table that goes with it.

The full-scale version of this is ``survsched sweep --config scenarios/223.toml``.
"""
import tempfile
from pathlib import Path

from survsched.cli import compare_rows
from survsched.model import ScenarioConfig
from survsched.schedulers import FixedPolicy, make_scheduler
from survsched.simulation import read_csv, sweep
from survsched.solver import value_iteration

scenario = ScenarioConfig.from_lists([1e-3, 1e-2, 1e-1], [1, 1, 3], tau=3)

# Every factory gets the scenario at the current tau; the solved policy has to be recomputed per tau.
factories = {
    "rr": lambda s: make_scheduler("rr"),
    "pq": lambda s: make_scheduler("pq"),
    "ol": lambda s: make_scheduler("ol"),
    "vi": lambda s: FixedPolicy(value_iteration(s).policy),
}
result = sweep(scenario, factories, tau_grid=range(3, 9), horizon=200_000, seeds=[0], scenario_id="113")

out = Path(tempfile.mkdtemp()) / "sweep.csv"
result.write_csv(out)
print("wrote", out)

header, table, flags = compare_rows(read_csv(out))
print("  ".join(f"{h:>8}" for h in header))
for row in table:
    print("  ".join(f"{c:>8}" for c in row))
for f in flags:
    print("ordering violation:", f)
