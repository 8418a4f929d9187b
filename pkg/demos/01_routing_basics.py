"""
Routing basics
==============

Score a token against the gate, route it with plain top-K and with a
collaboration-constrained table, and push it through a toy MoE layer.
"""

# %%
import numpy as np

from collabroute.core import gate_scores, init_experts, init_gate, moe_forward, route_c2r, route_topk
from collabroute.profiler import TopTTable

rng = np.random.default_rng(0)
d, n, k = 16, 8, 2
gate = init_gate(d, n, rng)
experts = init_experts(n, d, 32, rng)
x = rng.standard_normal(d)

logits = gate_scores(x, gate)
print("logits:", np.round(logits, 3))

# %%
# Top-K keeps the K largest logits and renormalises them with a softmax.
topk = route_topk(logits, k)
print("top-K:", topk.selected)

# %%
# A Top-T table lists, for every expert, the only experts allowed to join it.
# Here each expert may only pair with its neighbour (i xor 1).
table = TopTTable(np.array([[i ^ 1] for i in range(n)]))
c2r = route_c2r(logits, k, table)
print("C2R:  ", c2r.selected)
assert c2r.experts[0] == topk.experts[0]

# %%
# With full rows (T = N - 1) constrained routing is plain top-K again.
full = TopTTable(np.array([[j for j in range(n) if j != i] for i in range(n)]))
assert route_c2r(logits, k, full) == topk

# %%
y = moe_forward(x, c2r, experts)
print("layer output norm:", float(np.linalg.norm(y)))
