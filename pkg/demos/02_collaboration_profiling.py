"""
Profiling expert collaboration
==============================

Route a clustered synthetic workload with top-K, build the co-activation
matrix, and compare collaboration degrees against constrained routing.
"""

# %%
import math

import numpy as np

from collabroute.core import route_c2r_batch, route_topk_batch
from collabroute.profiler import collaboration_matrix, extract_top_t, profile
from collabroute.workload import WorkloadSpec, generate

spec = WorkloadSpec(50_000, 8, num_groups=4, cluster_strength=2.0, noise_scale=1.0, seed=1)
logits = generate(spec)

# %%
base = collaboration_matrix(route_topk_batch(logits, 2), 8)
print(base.counts)
prof = profile(base)
print("top-K degrees:", np.round(prof.degrees, 3))
print(f"layer degree {prof.layer_degree:.3f} (max ln 7 = {math.log(7):.3f})")

# %%
# Constrain each expert to its most frequent collaborators and profile again.
for t in (1, 2, 3, 7):
    table = extract_top_t(base, t)
    c2r = collaboration_matrix(route_c2r_batch(logits, 2, table), 8)
    print(f"T={t}: layer degree {profile(c2r).layer_degree:.3f}, "
          f"non-zero pairs {np.count_nonzero(np.triu(c2r.counts, 1))}")
