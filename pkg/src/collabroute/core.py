"""Routing primitives: gate scoring, top-K routing, collaboration-constrained
routing and a toy expert MLP for exercising routes end to end.

Every router here has a single-token form (``route_topk``, ``route_c2r``)
returning a :class:`RoutingDecision` and a batched form (``*_batch``)
returning a :class:`RoutingBatch`. The single-token forms run the batched
code on a one-row array, so both paths produce bit-identical weights.

Ties between equal logits always go to the lower expert index.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvariantError

__all__ = [
    "MoEConfig",
    "RoutingDecision",
    "RoutingBatch",
    "ExpertParams",
    "gate_scores",
    "route_topk",
    "route_topk_batch",
    "route_c2r",
    "route_c2r_batch",
    "softmax_rows",
    "expert_forward",
    "moe_forward",
    "init_gate",
    "init_experts",
]


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int
    top_k: int
    hidden_dim: int = 16
    num_layers: int = 1

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must lie in [1, {self.num_experts}], got {self.top_k}"
            )
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")


@dataclass(frozen=True)
class RoutingDecision:
    """The experts chosen for one token, ordered by descending logit
    (constrained routing keeps the top-1 expert first), with their
    softmax weights."""

    experts: tuple[int, ...]
    weights: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.experts)

    @property
    def selected(self) -> list[tuple[int, float]]:
        return list(zip(self.experts, self.weights))


@dataclass(frozen=True, eq=False)
class RoutingBatch:
    """Routing decisions for many tokens stored as two ``(tokens, K)`` arrays."""

    experts: np.ndarray
    weights: np.ndarray
    num_experts: int

    def __post_init__(self):
        if self.experts.ndim != 2 or self.experts.shape != self.weights.shape:
            raise ConfigError(
                f"experts {self.experts.shape} and weights {self.weights.shape} "
                "must be matching 2-D arrays"
            )

    def __len__(self) -> int:
        return self.experts.shape[0]

    @property
    def k(self) -> int:
        return self.experts.shape[1]

    def __getitem__(self, t: int) -> RoutingDecision:
        return RoutingDecision(
            tuple(int(e) for e in self.experts[t]),
            tuple(float(w) for w in self.weights[t]),
        )

    def __iter__(self):
        for t in range(len(self)):
            yield self[t]

    def identical(self, other: RoutingBatch) -> bool:
        """Bitwise equality of expert ids and weights."""
        return (
            self.experts.shape == other.experts.shape
            and np.array_equal(self.experts, other.experts)
            and self.weights.tobytes() == other.weights.tobytes()
        )

    @classmethod
    def from_decisions(
        cls, decisions: Sequence[RoutingDecision], num_experts: int
    ) -> RoutingBatch:
        if len(decisions) == 0:
            return cls(np.zeros((0, 0), np.int64), np.zeros((0, 0)), num_experts)
        k = decisions[0].k
        if any(d.k != k for d in decisions):
            raise ConfigError("all decisions in a batch must select the same K")
        experts = np.array([d.experts for d in decisions], dtype=np.int64)
        weights = np.array([d.weights for d in decisions], dtype=np.float64)
        return cls(experts, weights, num_experts)


def as_batch(decisions, num_experts: int | None = None) -> RoutingBatch:
    if isinstance(decisions, RoutingBatch):
        return decisions
    if num_experts is None:
        num_experts = 1 + max((max(d.experts) for d in decisions), default=-1)
    return RoutingBatch.from_decisions(list(decisions), num_experts)


def _check_logits(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ConfigError(f"expected a (tokens, N) logit array, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ConfigError("router logits must be finite")
    return logits


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise ConfigError(f"k must lie in [1, {n}], got {k}")


def softmax_rows(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gate_scores(x, w) -> np.ndarray:
    """Router logits ``x @ w`` for one token ``(d,)`` or a batch ``(T, d)``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ConfigError(f"gate weights must be a (d, N) matrix, got shape {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(
            f"token dimension {x.shape[-1]} does not match gate input dimension {w.shape[0]}"
        )
    return x @ w


def route_topk_batch(logits, k: int) -> RoutingBatch:
    logits = _check_logits(logits)
    n = logits.shape[1]
    _check_k(k, n)
    # stable sort on the negated logits: lower index wins ties
    experts = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    weights = softmax_rows(np.take_along_axis(logits, experts, axis=1))
    return RoutingBatch(experts.astype(np.int64), weights, n)


def route_topk(logits, k: int) -> RoutingDecision:
    return route_topk_batch(np.asarray(logits, dtype=np.float64)[None, :], k)[0]


def _table_rows(table, n: int) -> np.ndarray:
    rows = np.asarray(getattr(table, "rows", table))
    if rows.ndim != 2 or rows.shape[0] != n:
        raise ConfigError(f"Top-T table must have {n} rows, got shape {rows.shape}")
    return rows


def route_c2r_batch(logits, k: int, table) -> RoutingBatch:
    """Collaboration-constrained routing.

    The top-1 expert is picked freely. The remaining ``k - 1`` slots go to
    the highest-scoring experts inside that expert's Top-T collaborator row.
    Weights are a softmax over the ``k`` finally selected logits.
    """
    logits = _check_logits(logits)
    tokens, n = logits.shape
    _check_k(k, n)
    rows = _table_rows(table, n)
    if k - 1 > rows.shape[1]:
        raise ConfigError(
            f"Top-T rows hold {rows.shape[1]} experts but C2R needs k-1 = {k - 1}"
        )
    first = np.argmax(logits, axis=1)
    if k == 1:
        experts = first[:, None]
    else:
        allowed = np.zeros((n, n), dtype=bool)
        allowed[np.arange(n)[:, None], rows] = True
        if allowed[np.arange(n), np.arange(n)].any():
            raise ConfigError("a Top-T row contains its own expert")
        masked = np.where(allowed[first], logits, -np.inf)
        rest = np.argsort(-masked, axis=1, kind="stable")[:, : k - 1]
        experts = np.concatenate([first[:, None], rest], axis=1)
    weights = softmax_rows(np.take_along_axis(logits, experts, axis=1))
    return RoutingBatch(experts.astype(np.int64), weights, n)


def route_c2r(logits, k: int, table) -> RoutingDecision:
    return route_c2r_batch(np.asarray(logits, dtype=np.float64)[None, :], k, table)[0]


@dataclass(frozen=True, eq=False)
class ExpertParams:
    """Two-layer ReLU MLP, ``d -> d_ff -> d``."""

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    def __post_init__(self):
        d, d_ff = self.w_in.shape
        if self.b_in.shape != (d_ff,) or self.w_out.shape != (d_ff, d) or self.b_out.shape != (d,):
            raise ConfigError(
                "inconsistent expert shapes: "
                f"w_in {self.w_in.shape}, b_in {self.b_in.shape}, "
                f"w_out {self.w_out.shape}, b_out {self.b_out.shape}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.w_in.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.w_in.shape[1]


def expert_forward(x, e: ExpertParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != e.hidden_dim:
        raise ConfigError(
            f"token dimension {x.shape[-1]} does not match expert dimension {e.hidden_dim}"
        )
    h = np.maximum(x @ e.w_in + e.b_in, 0.0)
    return h @ e.w_out + e.b_out


def moe_forward(x, decision: RoutingDecision, experts: Sequence[ExpertParams]) -> np.ndarray:
    """Weighted sum of the selected experts' outputs for one token."""
    out = np.zeros(np.shape(x)[-1], dtype=np.float64)
    for eid, w in decision.selected:
        if not 0 <= eid < len(experts):
            raise InvariantError(f"decision references expert {eid}, only {len(experts)} exist")
        out += w * expert_forward(x, experts[eid])
    return out


def init_gate(hidden_dim: int, num_experts: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((hidden_dim, num_experts)) / np.sqrt(hidden_dim)


def init_experts(
    num_experts: int, hidden_dim: int, ffn_dim: int, rng: np.random.Generator
) -> list[ExpertParams]:
    scale_in = 1.0 / np.sqrt(hidden_dim)
    scale_out = 1.0 / np.sqrt(ffn_dim)
    return [
        ExpertParams(
            rng.standard_normal((hidden_dim, ffn_dim)) * scale_in,
            np.zeros(ffn_dim),
            rng.standard_normal((ffn_dim, hidden_dim)) * scale_out,
            np.zeros(hidden_dim),
        )
        for _ in range(num_experts)
    ]
