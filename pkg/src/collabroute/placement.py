"""Balanced expert-to-device placement.

``place_greedy`` groups experts that collaborate often onto the same device,
so that tokens routed to several of them cross the network once. Every
device hosts exactly ``N / EP`` experts.

Placement files are CSV with one record per expert::

    expert_id,device_id
    0,1
    1,0
    ...
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TraceFormatError
from .profiler import CollaborationMatrix

REFINE_SWEEPS = 10


@dataclass(frozen=True, eq=False)
class PlacementMap:
    assignment: np.ndarray
    ep: int

    def __post_init__(self):
        a = self.assignment
        n = a.shape[0]
        if self.ep < 1 or n % self.ep:
            raise ConfigError(f"{n} experts cannot be split evenly over EP={self.ep}")
        if a.size and (a.min() < 0 or a.max() >= self.ep):
            raise ConfigError(f"device ids must lie in [0, {self.ep})")
        sizes = np.bincount(a, minlength=self.ep)
        if np.any(sizes != n // self.ep):
            raise ConfigError(f"unbalanced placement, devices hold {sizes.tolist()} experts")

    @property
    def num_experts(self) -> int:
        return self.assignment.shape[0]

    @property
    def capacity(self) -> int:
        return self.num_experts // self.ep

    def devices(self) -> list[list[int]]:
        return [np.flatnonzero(self.assignment == d).tolist() for d in range(self.ep)]

    def __eq__(self, other):
        if not isinstance(other, PlacementMap):
            return NotImplemented
        return self.ep == other.ep and np.array_equal(self.assignment, other.assignment)


@dataclass(frozen=True)
class PlacementScore:
    intra_mass: int
    total_mass: int

    @property
    def locality(self) -> float:
        # nothing to split means nothing crosses devices
        return 1.0 if self.total_mass == 0 else self.intra_mass / self.total_mass


def _check_divisible(n: int, ep: int) -> None:
    if ep < 1 or n % ep:
        raise ConfigError(f"EP={ep} must be a positive divisor of N={n}")


def place_identity(n: int, ep: int) -> PlacementMap:
    _check_divisible(n, ep)
    return PlacementMap(np.arange(n, dtype=np.int64) // (n // ep), ep)


def _intra(w: np.ndarray, assignment: np.ndarray) -> int:
    same = assignment[:, None] == assignment[None, :]
    return int(np.triu(w * same, 1).sum())


def score(matrix: CollaborationMatrix, placement: PlacementMap) -> PlacementScore:
    if matrix.num_experts != placement.num_experts:
        raise ConfigError(
            f"matrix has {matrix.num_experts} experts, placement has {placement.num_experts}"
        )
    w = matrix.counts
    return PlacementScore(_intra(w, placement.assignment), int(np.triu(w, 1).sum()))


def _greedy_groups(w: np.ndarray, ep: int, first_seed: int | None = None) -> np.ndarray:
    n = w.shape[0]
    cap = n // ep
    assignment = np.full(n, -1, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    for dev in range(ep):
        if dev == 0 and first_seed is not None:
            seed = first_seed
        else:
            mass = np.where(free, w[:, free].sum(axis=1), -1)
            seed = int(np.argmax(mass))
        group = [seed]
        free[seed] = False
        while len(group) < cap:
            affinity = np.where(free, w[:, group].sum(axis=1), -1)
            pick = int(np.argmax(affinity))
            group.append(pick)
            free[pick] = False
        assignment[group] = dev
    return assignment


def _refine(w: np.ndarray, assignment: np.ndarray, ep: int, sweeps: int) -> np.ndarray:
    """Pairwise swaps between devices, taken whenever co-located mass grows."""
    a = assignment.copy()
    n = w.shape[0]
    for _ in range(sweeps):
        improved = False
        # conn[i, d]: collaboration mass between expert i and the experts on device d
        conn = w @ np.eye(ep, dtype=np.int64)[a]
        for i in range(n):
            for j in range(i + 1, n):
                di, dj = a[i], a[j]
                if di == dj:
                    continue
                gain = (conn[i, dj] - conn[i, di] - w[i, j]) + (conn[j, di] - conn[j, dj] - w[i, j])
                if gain > 0:
                    a[i], a[j] = dj, di
                    conn[:, di] += w[:, j] - w[:, i]
                    conn[:, dj] += w[:, i] - w[:, j]
                    improved = True
        if not improved:
            break
    return a


def place_greedy(
    matrix: CollaborationMatrix, ep: int, refine_sweeps: int = REFINE_SWEEPS
) -> PlacementMap:
    """Co-locate strongly collaborating experts under a hard capacity of N/EP.

    Devices are filled one at a time: the free expert with the most
    remaining collaboration mass seeds the device, then the free expert most
    connected to the device's current members joins until it is full.

    The fill is restarted with every expert seeding the first device, and the
    contiguous index layout is added as one more start. Each start is
    improved by pairwise swaps; the start with the largest co-located mass
    wins, earlier starts winning ties.
    """
    n = matrix.num_experts
    _check_divisible(n, ep)
    w = matrix.counts.astype(np.int64)
    starts = [_greedy_groups(w, ep)]
    if ep > 1:
        starts += [_greedy_groups(w, ep, s) for s in range(n)]
    starts.append(place_identity(n, ep).assignment)
    best, best_mass = None, -1
    for start in starts:
        cand = _refine(w, start, ep, refine_sweeps)
        mass = _intra(w, cand)
        if mass > best_mass:
            best, best_mass = cand, mass
    return PlacementMap(best, ep)


def write_placement(path, placement: PlacementMap) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("expert_id", "device_id"))
        for e, d in enumerate(placement.assignment):
            w.writerow((e, int(d)))


def read_placement(path, ep: int | None = None) -> PlacementMap:
    pairs: dict[int, int] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row == ["expert_id", "device_id"]:
                continue
            if len(row) != 2:
                raise TraceFormatError(f"expected 2 fields, got {len(row)}", path, lineno)
            try:
                e, d = int(row[0]), int(row[1])
            except ValueError:
                raise TraceFormatError(f"non-integer field in {row!r}", path, lineno) from None
            if e in pairs:
                raise TraceFormatError(f"expert {e} assigned twice", path, lineno)
            pairs[e] = d
    n = len(pairs)
    if sorted(pairs) != list(range(n)):
        raise ConfigError(f"{os.fspath(path)}: placement must cover experts 0..{n - 1}")
    assignment = np.array([pairs[e] for e in range(n)], dtype=np.int64)
    if ep is None:
        ep = int(assignment.max()) + 1 if n else 1
    return PlacementMap(assignment, ep)
