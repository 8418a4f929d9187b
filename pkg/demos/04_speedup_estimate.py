"""
Speedup estimate across EP degrees
==================================

Multiply the all-to-all share of wall-clock time by the token redundancy
for each expert-parallel degree, using the published Qwen1.5-MoE numbers.
"""

# %%
from collabroute.commsim import (
    PAPER_SPEEDUP,
    CommFractionTable,
    format_report,
    reproduce_paper_table,
    sweep_ep,
)
from collabroute.core import route_topk_batch
from collabroute.profiler import collaboration_matrix
from collabroute.workload import WorkloadSpec, generate

rows = reproduce_paper_table()
print(format_report(rows))
for m in rows:
    print(f"EP={m.ep}: estimated {100 * m.estimated_speedup:.2f}% vs reported {100 * PAPER_SPEEDUP[m.ep]:.1f}%")

# %%
# The same arithmetic on a simulated 60-expert, top-4 workload.
spec = WorkloadSpec(20_000, 60, num_groups=15, cluster_strength=2.0, seed=3)
decisions = route_topk_batch(generate(spec), 4)
matrix = collaboration_matrix(decisions, 60)
print(format_report(sweep_ep(decisions, matrix, [2, 3, 4, 5, 6], CommFractionTable.paper_default())))
