"""Small paired sweep: baseline vs semantic vs layout guidance on the same seeds.

The acceptance run uses 100 seeds; 20 keeps this demo to a few minutes.
"""
import sys
from pathlib import Path

from attnguide.evaluation import Condition, run_eval, write_report

N = int(sys.argv[1]) if len(sys.argv) > 1 else 20
root = Path(__file__).resolve().parents[1]
conditions = [Condition("baseline"), Condition("semantic", {}), Condition("layout", {}, boxes=True)]
report = run_eval(root / "checkpoints" / "toy", conditions, range(N), master_seed=7, n_perm=2000)
print(report.table())
write_report(report, Path(__file__).parent / "out" / "sweep")
