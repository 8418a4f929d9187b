"""Synthetic router-logit workloads and routing trace files.

Clustered workload model: the ``N`` experts form ``G`` interleaved groups
(group ``g`` owns experts ``g, g + G, g + 2G, ...``). Each token draws a
latent group uniformly, then

    logits = noise_scale * standard_normal(N) + cluster_strength * [expert in group]

Interleaving keeps groups away from contiguous index blocks, so the
contiguous baseline placement does not get co-location for free.

Random numbers come from numpy's PCG64 bit generator. Layer ``l`` of a
workload seeded with ``s`` uses ``SeedSequence([s, l])``, so layers can be
generated independently and in any order.

Trace format, one token per line::

    <layer_id>\\t<v1>,<v2>,...,<vN>          router logits
    <layer_id>\\t@<e1>:<w1>,<e2>:<w2>,...    pre-routed decision

Floats are written with 17 significant digits so doubles round-trip.
"""

from __future__ import annotations

import os
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .core import RoutingDecision
from .errors import ConfigError, TraceFormatError


@dataclass(frozen=True)
class WorkloadSpec:
    num_tokens: int
    num_experts: int
    hidden_dim: int = 16
    num_groups: int = 1
    cluster_strength: float = 0.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_tokens < 0:
            raise ConfigError(f"num_tokens must be >= 0, got {self.num_tokens}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.num_groups < 1 or self.num_experts % self.num_groups:
            raise ConfigError(
                f"num_groups={self.num_groups} must divide num_experts={self.num_experts}"
            )
        for name in ("cluster_strength", "noise_scale"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def group_size(self) -> int:
        return self.num_experts // self.num_groups


def group_members(spec: WorkloadSpec) -> np.ndarray:
    """``(G, N/G)`` array of expert ids per latent group."""
    return np.arange(spec.num_experts).reshape(spec.group_size, spec.num_groups).T.copy()


def expert_groups(spec: WorkloadSpec) -> np.ndarray:
    """Group id of every expert."""
    return np.arange(spec.num_experts) % spec.num_groups


def _rng(spec: WorkloadSpec, layer_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, layer_id])))


def generate_with_groups(spec: WorkloadSpec, layer_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(num_tokens, N)`` and the latent group drawn for each token."""
    rng = _rng(spec, layer_id)
    groups = rng.integers(0, spec.num_groups, size=spec.num_tokens)
    logits = spec.noise_scale * rng.standard_normal((spec.num_tokens, spec.num_experts))
    logits += spec.cluster_strength * (expert_groups(spec)[None, :] == groups[:, None])
    return logits, groups


def generate(spec: WorkloadSpec, layer_id: int = 0) -> np.ndarray:
    return generate_with_groups(spec, layer_id)[0]


def generate_layers(spec: WorkloadSpec, num_layers: int) -> list[np.ndarray]:
    return [generate(spec, layer) for layer in range(num_layers)]


def generate_embeddings(spec: WorkloadSpec, layer_id: int = 0) -> np.ndarray:
    """Token embeddings ``(num_tokens, hidden_dim)`` for the toy expert forward pass."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([spec.seed, layer_id, 1]))
    )
    return rng.standard_normal((spec.num_tokens, spec.hidden_dim))


@dataclass(frozen=True)
class TraceRecord:
    layer_id: int
    logits: tuple[float, ...] | None = None
    decision: RoutingDecision | None = None

    def __post_init__(self):
        if (self.logits is None) == (self.decision is None):
            raise ConfigError("a trace record holds exactly one of logits or decision")


def _f(v: float) -> str:
    return format(float(v), ".17g")


def format_record(rec: TraceRecord) -> str:
    if rec.logits is not None:
        body = ",".join(_f(v) for v in rec.logits)
    else:
        body = "@" + ",".join(f"{e}:{_f(w)}" for e, w in rec.decision.selected)
    return f"{rec.layer_id}\t{body}"


def write_trace(records: Iterable[TraceRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(format_record(rec))
            fh.write("\n")


def _parse_float(s: str, path, lineno: int) -> float:
    try:
        v = float(s)
    except ValueError:
        raise TraceFormatError(f"bad number {s!r}", path, lineno) from None
    if not np.isfinite(v):
        raise TraceFormatError(f"non-finite value {s!r}", path, lineno)
    return v


def parse_record(line: str, path=None, lineno: int | None = None) -> TraceRecord:
    head, sep, body = line.partition("\t")
    if not sep:
        raise TraceFormatError("missing tab after layer id", path, lineno)
    try:
        layer = int(head)
    except ValueError:
        raise TraceFormatError(f"bad layer id {head!r}", path, lineno) from None
    if body.startswith("@"):
        experts, weights = [], []
        for item in body[1:].split(","):
            e, colon, w = item.partition(":")
            if not colon:
                raise TraceFormatError(f"bad expert:weight pair {item!r}", path, lineno)
            try:
                experts.append(int(e))
            except ValueError:
                raise TraceFormatError(f"bad expert id {e!r}", path, lineno) from None
            weights.append(_parse_float(w, path, lineno))
        if len(set(experts)) != len(experts):
            raise TraceFormatError("duplicate expert in decision", path, lineno)
        return TraceRecord(layer, decision=RoutingDecision(tuple(experts), tuple(weights)))
    values = tuple(_parse_float(v, path, lineno) for v in body.split(","))
    return TraceRecord(layer, logits=values)


def read_trace(path, num_experts: int | None = None) -> list[TraceRecord]:
    """Parse a trace file. With ``num_experts`` set, every record is checked against it."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            rec = parse_record(line, path, lineno)
            if rec.logits is not None:
                n = len(rec.logits)
                if num_experts is None:
                    num_experts = n
                elif n != num_experts:
                    raise ConfigError(
                        f"{os.fspath(path)}:{lineno}: record has {n} logits, expected {num_experts}"
                    )
            elif min(rec.decision.experts) < 0 or (
                num_experts is not None and max(rec.decision.experts) >= num_experts
            ):
                raise ConfigError(
                    f"{os.fspath(path)}:{lineno}: expert id out of range for N={num_experts}"
                )
            records.append(rec)
    return records


def logits_records(logits: np.ndarray, layer_id: int = 0) -> list[TraceRecord]:
    return [TraceRecord(layer_id, logits=tuple(float(v) for v in row)) for row in logits]


def decision_records(decisions, layer_id: int = 0) -> list[TraceRecord]:
    return [TraceRecord(layer_id, decision=d) for d in decisions]
