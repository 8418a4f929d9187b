"""
Placement and zero-redundancy dispatch
======================================

Place experts on devices and count how many token copies the all-to-all
sends with and without per-device deduplication.
"""

# %%
import numpy as np

from collabroute.commsim import account_dispatch, devices_per_token, redundancy_ratio
from collabroute.core import route_c2r_batch, route_topk_batch
from collabroute.placement import place_greedy, place_identity, score
from collabroute.profiler import collaboration_matrix, extract_top_t
from collabroute.workload import WorkloadSpec, generate

spec = WorkloadSpec(100_000, 8, num_groups=4, cluster_strength=10.0, noise_scale=0.1, seed=2)
logits = generate(spec)
topk = route_topk_batch(logits, 2)
base = collaboration_matrix(topk, 8)

# %%
# Groups are interleaved ({0,4}, {1,5}, ...) so contiguous placement splits them.
for name, pm in [("identity", place_identity(8, 4)), ("greedy", place_greedy(base, 4))]:
    acc = account_dispatch(topk, pm)
    print(f"top-K + {name:8s} devices={pm.devices()} locality={score(base, pm).locality:.3f} "
          f"naive={acc.naive_copies} dedup={acc.dedup_copies} r={redundancy_ratio(acc):.3f}")

# %%
c2r = route_c2r_batch(logits, 2, extract_top_t(base, 1))
pm = place_greedy(collaboration_matrix(c2r, 8), 4)
print("C2R + greedy: single-device tokens",
      float(np.mean(devices_per_token(c2r, pm) == 1)),
      "redundancy", redundancy_ratio(account_dispatch(c2r, pm)))
