"""Expert co-activation profiling.

A :class:`CollaborationMatrix` counts, per layer, how often each pair of
experts is selected by the same token. From it we derive each expert's
collaboration degree (entropy of its partner distribution, natural log)
and the Top-T collaborator table used by constrained routing.

Heatmap CSV layout, one row per matrix cell in row-major order::

    # layer=0 tokens_seen=1000 experts=4
    layer,i,j,count
    0,0,0,0
    0,0,1,412
    ...

Several layers may share one file; each layer starts with its own comment line.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .core import RoutingDecision, as_batch
from .errors import ConfigError, InvariantError, TraceFormatError

HEATMAP_HEADER = ("layer", "i", "j", "count")


@dataclass(eq=False)
class CollaborationMatrix:
    counts: np.ndarray
    layer_id: int = 0
    tokens_seen: int = 0

    @classmethod
    def zeros(cls, num_experts: int, layer_id: int = 0) -> CollaborationMatrix:
        if num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {num_experts}")
        return cls(np.zeros((num_experts, num_experts), dtype=np.int64), layer_id, 0)

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]

    def upper_sum(self) -> int:
        return int(np.triu(self.counts, 1).sum())

    def check(self) -> None:
        """Raise :class:`InvariantError` unless symmetric with a zero diagonal."""
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InvariantError(f"collaboration matrix must be square, got {c.shape}")
        if not np.array_equal(c, c.T):
            raise InvariantError("collaboration matrix is not symmetric")
        if np.any(np.diag(c) != 0):
            raise InvariantError("collaboration matrix has a non-zero diagonal")
        if np.any(c < 0):
            raise InvariantError("collaboration matrix has negative counts")

    def __eq__(self, other):
        if not isinstance(other, CollaborationMatrix):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.tokens_seen == other.tokens_seen
            and np.array_equal(self.counts, other.counts)
        )


def accumulate(matrix: CollaborationMatrix, decision: RoutingDecision) -> CollaborationMatrix:
    """Add one token's co-activations to ``matrix`` in place and return it."""
    n = matrix.num_experts
    experts = decision.experts
    if len(set(experts)) != len(experts):
        raise InvariantError(f"decision selects duplicate experts: {experts}")
    for e in experts:
        if not 0 <= e < n:
            raise InvariantError(f"expert id {e} out of range for N={n}")
    for a in range(len(experts)):
        for b in range(a + 1, len(experts)):
            i, j = experts[a], experts[b]
            matrix.counts[i, j] += 1
            matrix.counts[j, i] += 1
    matrix.tokens_seen += 1
    return matrix


def accumulate_batch(matrix: CollaborationMatrix, decisions) -> CollaborationMatrix:
    """Vectorised :func:`accumulate` over a :class:`RoutingBatch` or sequence."""
    n = matrix.num_experts
    batch = as_batch(decisions, n)
    if len(batch) == 0:
        return matrix
    ex = batch.experts
    if ex.min() < 0 or ex.max() >= n:
        raise InvariantError(f"expert ids out of range for N={n}")
    s = np.sort(ex, axis=1)
    if np.any(s[:, 1:] == s[:, :-1]):
        raise InvariantError("a decision selects duplicate experts")
    k = batch.k
    flat = np.zeros(n * n, dtype=np.int64)
    for a in range(k):
        for b in range(a + 1, k):
            i, j = ex[:, a], ex[:, b]
            flat += np.bincount(i * n + j, minlength=n * n)
            flat += np.bincount(j * n + i, minlength=n * n)
    matrix.counts += flat.reshape(n, n)
    matrix.tokens_seen += len(batch)
    return matrix


def collaboration_matrix(decisions, num_experts: int, layer_id: int = 0) -> CollaborationMatrix:
    return accumulate_batch(CollaborationMatrix.zeros(num_experts, layer_id), decisions)


def merge(a: CollaborationMatrix, b: CollaborationMatrix) -> CollaborationMatrix:
    if a.counts.shape != b.counts.shape:
        raise ConfigError(f"cannot merge matrices of shape {a.counts.shape} and {b.counts.shape}")
    if a.layer_id != b.layer_id:
        raise ConfigError(f"cannot merge layer {a.layer_id} with layer {b.layer_id}")
    return CollaborationMatrix(a.counts + b.counts, a.layer_id, a.tokens_seen + b.tokens_seen)


@dataclass(eq=False)
class CollaborationProfile:
    """Row-normalised frequencies and per-expert entropy degrees.

    Experts whose row is all zero were never co-activated: their frequency
    row stays zero, ``active`` is False and their degree is NaN. They do
    not enter ``layer_degree``.
    """

    frequencies: np.ndarray
    degrees: np.ndarray
    active: np.ndarray
    layer_degree: float
    layer_id: int = 0


def profile(matrix: CollaborationMatrix) -> CollaborationProfile:
    counts = matrix.counts.astype(np.float64)
    np.fill_diagonal(counts, 0.0)
    totals = counts.sum(axis=1)
    active = totals > 0
    freqs = np.zeros_like(counts)
    freqs[active] = counts[active] / totals[active, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(freqs > 0, freqs * np.log(freqs), 0.0)
    degrees = np.where(active, -terms.sum(axis=1), np.nan)
    # -0.0 would leak from rows with a single partner
    degrees = np.where(degrees == 0, 0.0, degrees)
    layer = float(np.mean(degrees[active])) if active.any() else math.nan
    return CollaborationProfile(freqs, degrees, active, layer, matrix.layer_id)


@dataclass(frozen=True, eq=False)
class TopTTable:
    """Per-expert list of its ``t`` most frequent collaborators."""

    rows: np.ndarray

    def __post_init__(self):
        rows = self.rows
        if rows.ndim != 2:
            raise ConfigError(f"Top-T rows must be 2-D, got shape {rows.shape}")
        n, t = rows.shape
        if n > 1 and not 1 <= t <= n - 1:
            raise ConfigError(f"T must lie in [1, {n - 1}], got {t}")
        if rows.size and (rows.min() < 0 or rows.max() >= n):
            raise ConfigError("Top-T row references an expert out of range")
        for i in range(n):
            r = rows[i]
            if i in r or len(set(r.tolist())) != t:
                raise ConfigError(f"Top-T row {i} must hold {t} distinct experts other than {i}")

    @property
    def t(self) -> int:
        return self.rows.shape[1]

    @property
    def num_experts(self) -> int:
        return self.rows.shape[0]

    def __getitem__(self, i: int) -> list[int]:
        return [int(e) for e in self.rows[i]]

    def __eq__(self, other):
        if not isinstance(other, TopTTable):
            return NotImplemented
        return np.array_equal(self.rows, other.rows)


def _check_t(t: int, n: int) -> None:
    if not 1 <= t <= n - 1:
        raise ConfigError(f"T must lie in [1, N-1] = [1, {n - 1}], got {t}")


def extract_top_t(matrix: CollaborationMatrix, t: int) -> TopTTable:
    """Sort each row by descending count (lower index first on ties) and keep ``t``."""
    n = matrix.num_experts
    _check_t(t, n)
    keys = matrix.counts.astype(np.float64)
    np.fill_diagonal(keys, -np.inf)
    rows = np.argsort(-keys, axis=1, kind="stable")[:, :t]
    return TopTTable(rows.astype(np.int64))


def random_top_t(num_experts: int, t: int, rng: np.random.Generator) -> TopTTable:
    """Top-T table filled with random distinct collaborators (never self)."""
    _check_t(t, num_experts)
    rows = np.empty((num_experts, t), dtype=np.int64)
    for i in range(num_experts):
        others = np.delete(np.arange(num_experts), i)
        rows[i] = rng.permutation(others)[:t]
    return TopTTable(rows)


def write_heatmaps(path, matrices: Iterable[CollaborationMatrix]) -> None:
    own = isinstance(path, (str, os.PathLike))
    fh = open(path, "w", newline="") if own else path
    try:
        w = csv.writer(fh, lineterminator="\n")
        for m in matrices:
            n = m.num_experts
            fh.write(f"# layer={m.layer_id} tokens_seen={m.tokens_seen} experts={n}\n")
            w.writerow(HEATMAP_HEADER)
            for i in range(n):
                for j in range(n):
                    w.writerow((m.layer_id, i, j, int(m.counts[i, j])))
    finally:
        if own:
            fh.close()


def export_heatmap(matrix: CollaborationMatrix, path=None) -> np.ndarray:
    """Return the row-major count grid; also write it as CSV when ``path`` is given."""
    if path is not None:
        write_heatmaps(path, [matrix])
    return matrix.counts.copy()


_META = re.compile(r"#\s*layer=(-?\d+)\s+tokens_seen=(\d+)\s+experts=(\d+)\s*$")


def read_heatmaps(path) -> list[CollaborationMatrix]:
    own = isinstance(path, (str, os.PathLike))
    fh = open(path, newline="") if own else path
    try:
        text = fh.read()
    finally:
        if own:
            fh.close()
    out: list[CollaborationMatrix] = []
    cur = None
    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            m = _META.match(line)
            if not m:
                raise TraceFormatError(f"bad heatmap metadata {line!r}", path, lineno)
            layer, seen, n = (int(g) for g in m.groups())
            cur = CollaborationMatrix(np.zeros((n, n), np.int64), layer, seen)
            out.append(cur)
            continue
        parts = line.split(",")
        if tuple(parts) == HEATMAP_HEADER:
            continue
        if cur is None or len(parts) != 4:
            raise TraceFormatError(f"unexpected heatmap line {line!r}", path, lineno)
        try:
            layer, i, j, c = (int(p) for p in parts)
        except ValueError:
            raise TraceFormatError(f"non-integer heatmap field in {line!r}", path, lineno) from None
        if layer != cur.layer_id or not (0 <= i < cur.num_experts and 0 <= j < cur.num_experts):
            raise TraceFormatError(f"heatmap cell {line!r} out of range", path, lineno)
        cur.counts[i, j] = c
    return out


def profile_layers(
    decisions_by_layer: Sequence, num_experts: int
) -> list[tuple[CollaborationMatrix, CollaborationProfile]]:
    out = []
    for layer_id, decisions in enumerate(decisions_by_layer):
        m = collaboration_matrix(decisions, num_experts, layer_id)
        out.append((m, profile(m)))
    return out
