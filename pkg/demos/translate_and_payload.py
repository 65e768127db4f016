"""Translate node embeddings onto the frozen anchor simplex and count round payloads.

Run: python3 demos/translate_and_payload.py
"""
import numpy as np

from stagefgl.propagation import AttentionGNN
from stagefgl.protocol import FULL, GAP_ONLY, ClientUpload, ServerBroadcast, count_scalars, payload_ratio
from stagefgl.semantics import anchor_conditional_means, entropy_loss, init_anchor_bank, translate

rng = np.random.default_rng(0)
bank = init_anchor_bank(128, 64, seed=0)
H = rng.standard_normal((500, 64))

for tau_s in (1.0, 0.1, 0.02):
    sa = translate(H, bank, tau_s)
    ent = entropy_loss(sa.Q)[0]
    print(f"tau_s={tau_s:<5} mean max q={sa.Q.max(axis=1).mean():.3f}  marginal entropy loss={ent:.3f}")

stats = anchor_conditional_means(H, translate(H, bank, 0.1).Q)
up = ClientUpload(0, 1, stats.active, stats.means, stats.counts, [0.1, 0.05], 0.0)
down = ServerBroadcast(1, bank.B, np.zeros(65), "demo")
for mode in (GAP_ONLY, FULL):
    u, d = sum(count_scalars(up, mode).values()), sum(count_scalars(down, mode).values())
    print(f"{mode:9s} upload {u:6d}  download {d:6d} scalars")

baseline = AttentionGNN((1000, 1000)).params.size()
print(f"FedAvg model of {baseline} params -> {payload_ratio(8192, baseline):.1f}x fewer scalars")
