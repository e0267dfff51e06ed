"""Train two deep Q networks, one on the true channels and one on harsher ones.

Both are evaluated on the true channels over a range of survival times,
including values beyond the one used for training.  The default step count
is a tenth of the full preset so the script finishes in a minute or two;
pass ``500000`` for the full run.
"""
import sys

from survsched.dqn import greedy_policy, preset, train
from survsched.model import ScenarioConfig
from survsched.schedulers import PriorityQueue
from survsched.simulation import exact_failure_rate

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 50_000
true = ScenarioConfig.from_lists([1e-3, 1e-2, 1e-1], [2, 2, 3], tau=10)

nets = {}
for name in ("nn1", "nn2"):
    cfg = preset(name, steps=steps, eval_every=max(steps // 5, 1))
    print(f"training {name} on p={cfg.training_p} for {steps} steps")
    nets[name], log = train(true, cfg)
    for row in log:
        print(f"  step {row.step:>7}  loss {row.loss:.4f}  eps {row.epsilon:.2f}  F at tau=10 {row.eval_F:.3e}")

print(f"{'tau':>4} {'PQ':>10} {'DQ1':>10} {'DQ2':>10}")
for tau in range(8, 13):
    s = true.replace(tau=tau)
    pq = exact_failure_rate(s, PriorityQueue("lowest").bind(s).as_policy())
    dq = [exact_failure_rate(s, greedy_policy(nets[n], s)) for n in ("nn1", "nn2")]
    print(f"{tau:>4} {pq:>10.3e} {dq[0]:>10.3e} {dq[1]:>10.3e}")
