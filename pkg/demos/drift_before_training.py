"""Cross-client centroid drift of the raw protocol-space inputs as the drift strength grows.

Run: python3 demos/drift_before_training.py
"""
import numpy as np

from stagefgl import fedsim
from stagefgl.diagnostics import centroid_drift

for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
    cfg = fedsim.RunConfig(alpha=alpha, seeds=(0,))
    sim = fedsim.Simulation(cfg, 0)
    layers = [c.layer_embeddings() for c in sim.clients]
    labels = [c.graph.labels for c in sim.clients]
    d0 = centroid_drift([l[0] for l in layers], labels).overall
    d2 = centroid_drift([l[-1] for l in layers], labels).overall
    print(f"alpha={alpha:<5} drift layer0={d0:.3f}  layer2={d2:.3f}  growth={100 * (d2 / d0 - 1):+.1f}%")
