"""Token-copy accounting for the expert-parallel all-to-all.

A naive dispatch sends one copy of a token per selected expert. The
zero-redundancy dispatch sends one copy per distinct destination device and
replicates locally. The fraction of copies saved is the redundancy ``r``;
multiplied by the share ``p`` of wall-clock time spent in all-to-all it
gives the estimated speedup.

The combine all-to-all mirrors dispatch, so round-trip copy counts are
twice the dispatch counts and the redundancy ratio is the same under either
reading.

Comm-fraction files hold one ``ep,fraction`` record per line (a header line
``ep,fraction`` and ``#`` comments are allowed).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import as_batch
from .errors import ConfigError, InvariantError, TraceFormatError
from .placement import PlacementMap, place_greedy, place_identity
from .profiler import CollaborationMatrix

log = logging.getLogger(__name__)

# All-to-all share of inference time measured on Qwen1.5-MoE (Table 3).
PAPER_COMM_FRACTIONS = {2: 0.301, 3: 0.407, 4: 0.619, 5: 0.763, 6: 0.772}
# Token redundancy measured on the same model, and the speedups reported from them.
PAPER_REDUNDANCY = {2: 0.583, 3: 0.476, 4: 0.402, 5: 0.384, 6: 0.329}
PAPER_SPEEDUP = {2: 0.176, 3: 0.194, 4: 0.249, 5: 0.293, 6: 0.254}

REPORT_COLUMNS = (
    "ep",
    "naive_copies",
    "dedup_copies",
    "redundancy",
    "comm_fraction",
    "comm_fraction_source",
    "estimated_speedup",
    "round_trip_naive_copies",
    "round_trip_dedup_copies",
)


@dataclass(eq=False)
class DispatchAccount:
    naive_copies: int
    dedup_copies: int
    per_device_recv: np.ndarray
    tokens: int
    per_device_send: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.per_device_send is None:
            self.per_device_send = np.zeros_like(self.per_device_recv)

    @property
    def round_trip_naive_copies(self) -> int:
        return 2 * self.naive_copies

    @property
    def round_trip_dedup_copies(self) -> int:
        return 2 * self.dedup_copies

    def check(self) -> None:
        if self.dedup_copies > self.naive_copies:
            raise InvariantError("deduplicated copies exceed naive copies")
        if self.dedup_copies < self.tokens:
            raise InvariantError("a token reached no device")
        if int(self.per_device_recv.sum()) != self.dedup_copies:
            raise InvariantError("per-device receives do not sum to deduplicated copies")

    def __add__(self, other: DispatchAccount) -> DispatchAccount:
        if self.per_device_recv.shape != other.per_device_recv.shape:
            raise ConfigError("cannot combine accounts over different EP degrees")
        return DispatchAccount(
            self.naive_copies + other.naive_copies,
            self.dedup_copies + other.dedup_copies,
            self.per_device_recv + other.per_device_recv,
            self.tokens + other.tokens,
            self.per_device_send + other.per_device_send,
        )


def account_dispatch(decisions, placement: PlacementMap) -> DispatchAccount:
    """Count naive and deduplicated token copies for one layer's routing.

    Each token's source device is assigned round-robin (token ``t`` lives on
    device ``t % EP``); ``per_device_send`` counts the deduplicated copies
    leaving each source. Copy counts do not depend on the source.
    """
    batch = as_batch(decisions, placement.num_experts)
    ep = placement.ep
    tokens = len(batch)
    if tokens == 0:
        z = np.zeros(ep, dtype=np.int64)
        return DispatchAccount(0, 0, z, 0, z.copy())
    ex = batch.experts
    if ex.min() < 0 or ex.max() >= placement.num_experts:
        raise InvariantError("decision references an expert missing from the placement")
    dev = placement.assignment[ex]
    hit = np.zeros((tokens, ep), dtype=bool)
    hit[np.arange(tokens)[:, None], dev] = True
    per_token = hit.sum(axis=1)
    recv = hit.sum(axis=0).astype(np.int64)
    send = np.bincount(np.arange(tokens) % ep, weights=per_token, minlength=ep).astype(np.int64)
    return DispatchAccount(int(ex.size), int(per_token.sum()), recv, tokens, send)


def devices_per_token(decisions, placement: PlacementMap) -> np.ndarray:
    batch = as_batch(decisions, placement.num_experts)
    dev = np.sort(placement.assignment[batch.experts], axis=1)
    return 1 + (dev[:, 1:] != dev[:, :-1]).sum(axis=1)


def redundancy_ratio(account: DispatchAccount) -> float:
    if account.naive_copies <= 0:
        raise ConfigError("redundancy is undefined for an empty dispatch account")
    return 1.0 - account.dedup_copies / account.naive_copies


def _check_unit(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")


def estimate_speedup(r: float, p: float) -> float:
    """Fraction of inference time saved: redundancy times all-to-all share."""
    _check_unit("redundancy", r)
    _check_unit("comm fraction", p)
    return r * p


@dataclass(frozen=True)
class CommFractionTable:
    fractions: Mapping[int, float]
    source: str = "paper-default"

    def __post_init__(self):
        for ep, p in self.fractions.items():
            _check_unit(f"comm fraction for EP={ep}", p)

    def get(self, ep: int) -> float | None:
        return self.fractions.get(ep)

    @classmethod
    def paper_default(cls) -> CommFractionTable:
        return cls(dict(PAPER_COMM_FRACTIONS), "paper-default")


def read_comm_fractions(path) -> CommFractionTable:
    fractions: dict[int, float] = {}
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.replace(" ", "") == "ep,fraction":
                continue
            parts = [p.strip() for p in line.replace("\t", ",").split(",")]
            if len(parts) != 2:
                raise TraceFormatError(f"expected 'ep,fraction', got {line!r}", path, lineno)
            try:
                ep, p = int(parts[0]), float(parts[1])
            except ValueError:
                raise TraceFormatError(f"bad record {line!r}", path, lineno) from None
            if not math.isfinite(p) or not 0.0 <= p <= 1.0:
                raise TraceFormatError(f"fraction {p} outside [0, 1]", path, lineno)
            fractions[ep] = p
    return CommFractionTable(fractions, "measured-external")


def write_comm_fractions(path, table: CommFractionTable) -> None:
    with open(path, "w") as fh:
        fh.write("ep,fraction\n")
        for ep in sorted(table.fractions):
            fh.write(f"{ep},{table.fractions[ep]!r}\n")


@dataclass(frozen=True)
class SpeedupModel:
    ep: int
    redundancy: float
    comm_fraction: float | None
    comm_fraction_source: str
    naive_copies: int = 0
    dedup_copies: int = 0

    @property
    def estimated_speedup(self) -> float | None:
        if self.comm_fraction is None:
            return None
        return estimate_speedup(self.redundancy, self.comm_fraction)

    def row(self) -> dict:
        return {
            "ep": self.ep,
            "naive_copies": self.naive_copies,
            "dedup_copies": self.dedup_copies,
            "redundancy": self.redundancy,
            "comm_fraction": self.comm_fraction,
            "comm_fraction_source": self.comm_fraction_source,
            "estimated_speedup": self.estimated_speedup,
            "round_trip_naive_copies": 2 * self.naive_copies,
            "round_trip_dedup_copies": 2 * self.dedup_copies,
        }


def sweep_ep(
    decisions,
    matrix: CollaborationMatrix,
    ep_values: Iterable[int],
    fractions: CommFractionTable,
    placement: str = "greedy",
) -> list[SpeedupModel]:
    """Place, account and estimate speedup for each EP degree (ascending).

    EP values that do not divide N are logged and skipped.
    """
    n = matrix.num_experts
    batch = as_batch(decisions, n)
    out = []
    for ep in sorted(set(ep_values)):
        if ep < 1 or n % ep:
            log.warning("skipping EP=%d: does not divide N=%d", ep, n)
            continue
        pm = place_greedy(matrix, ep) if placement == "greedy" else place_identity(n, ep)
        acc = account_dispatch(batch, pm)
        out.append(
            SpeedupModel(
                ep,
                redundancy_ratio(acc),
                fractions.get(ep),
                fractions.source,
                acc.naive_copies,
                acc.dedup_copies,
            )
        )
    return out


def reproduce_paper_table(
    redundancy: Mapping[int, float] = PAPER_REDUNDANCY,
    fractions: CommFractionTable | None = None,
) -> list[SpeedupModel]:
    """Speedup rows computed from externally measured redundancy values."""
    fractions = fractions or CommFractionTable.paper_default()
    return [
        SpeedupModel(ep, redundancy[ep], fractions.get(ep), fractions.source)
        for ep in sorted(redundancy)
    ]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(out_dir, models: Sequence[SpeedupModel], stem: str = "report") -> dict[str, str]:
    """Write ``<stem>.csv``, ``<stem>.json`` and an aligned ``<stem>.txt``."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [m.row() for m in models]
    paths = {ext: os.path.join(out_dir, f"{stem}.{ext}") for ext in ("csv", "json", "txt")}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    with open(paths["json"], "w") as fh:
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    with open(paths["txt"], "w") as fh:
        fh.write(format_report(models))
    return paths


def format_report(models: Sequence[SpeedupModel]) -> str:
    head = f"{'EP':>3}  {'naive':>10}  {'dedup':>10}  {'redundancy':>10}  {'a2a time':>9}  {'speedup':>8}  source\n"
    lines = [head]
    for m in models:
        p = "-" if m.comm_fraction is None else f"{100 * m.comm_fraction:8.1f}%"
        s = "-" if m.estimated_speedup is None else f"{100 * m.estimated_speedup:7.1f}%"
        lines.append(
            f"{m.ep:>3}  {m.naive_copies:>10}  {m.dedup_copies:>10}  "
            f"{100 * m.redundancy:9.1f}%  {p:>9}  {s:>8}  {m.comm_fraction_source}\n"
        )
    return "".join(lines)
