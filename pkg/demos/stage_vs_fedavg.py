"""Short STAGE vs FedAvg comparison with diagnostics on the default synthetic benchmark.

Run: python3 demos/stage_vs_fedavg.py [rounds]   (default 40 rounds, one seed)
"""
import sys

from stagefgl import fedsim
from stagefgl.diagnostics import mean_purity

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 40
for method in ("fedavg", "stage", "stage_no_gap"):
    sim = fedsim.Simulation(fedsim.RunConfig(method=method, rounds=rounds, seeds=(0,)), 0)
    last = sim.run()
    d = fedsim.collect_diagnostics(sim)
    purity = mean_purity(d["purity"]) if d["purity"] else float("nan")
    print(f"{method:13s} test acc {last.server['test']:.4f}  drift growth "
          f"{d['growth']['overall']:+.1f}%  top-10 purity {purity:.3f}  "
          f"payload down {last.server['down_full']} scalars")
