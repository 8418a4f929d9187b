"""
Sweeping the collaboration budget T
===================================

Drive the command-line pipeline from Python: one top-K baseline row, then
one row per T. Degrees grow with T and the T = N - 1 row equals the
baseline.
"""

# %%
import tempfile

from collabroute.cli import main

with tempfile.TemporaryDirectory() as out:
    main(["sweep-t", "--tokens", "20000", "--groups", "4", "--cluster-strength", "2",
          "--ep", "2,4", "--out", out])
