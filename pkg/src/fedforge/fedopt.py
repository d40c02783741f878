"""Federated aggregation and the server-side optimizer.

Client contributions arrive as float64 deltas (received_weights - trained_weights)
so the server can reconstruct a client's trained weights bit-exactly; float32
deltas lose low-order bits whenever a parameter lands near a rounding boundary.
Aggregation accumulates n_k-weighted sums in float64. The server materializes
the global model and the momentum buffer as float32 at each round boundary,
which is exactly what the checkpoint persists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .params import ParamError, ParamVector, l2_norm, require_finite


class AggregationError(RuntimeError):
    """Protocol violation while accumulating client updates."""


@dataclass
class ClientUpdate:
    """One client's per-round contribution.

    delta is (global weights the client received) - (weights after local
    training), in float64.
    """

    client_id: int
    round: int
    n_k: int
    delta: np.ndarray
    local_metrics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_k < 1:
            raise ParamError(f"client {self.client_id}: n_k must be >= 1, got {self.n_k}")
        self.delta = np.ascontiguousarray(self.delta, dtype=np.float64)
        if self.delta.ndim != 1 or self.delta.size == 0:
            raise ParamError(f"client {self.client_id}: delta must be a non-empty 1-D vector")
        require_finite(self.delta, f"delta of client {self.client_id}")


def client_weight(n_k: int, n_total: int) -> float:
    """FedAvg weight: the client's share of the total sample count."""
    if n_total == 0:
        raise ParamError("total sample count is zero")
    if not 1 <= n_k <= n_total:
        raise ParamError(f"n_k={n_k} outside [1, {n_total}]")
    return n_k / n_total


class AggregatorState:
    """Streaming weighted-sum aggregator for one round.

    Supports two modes:
      * streaming (default): contributions fold into a float64 running sum as
        they arrive, so aggregation overlaps client training; the result is
        arrival-order dependent only at float64 rounding level.
      * deterministic: contributions are buffered and reduced at finalize in
        canonical client-id order with a pairwise tree, producing bit-identical
        results for any arrival order.

    Two aggregators with disjoint contributor sets can be merged, which makes
    the aggregation associative for partial/parallel collection.
    """

    def __init__(self, round_num: int, model_len: int, *, deterministic: bool = False):
        if model_len <= 0:
            raise ParamError(f"model_len must be positive, got {model_len}")
        self.round = round_num
        self.model_len = model_len
        self.deterministic = deterministic
        self.weighted_sum = np.zeros(model_len, dtype=np.float64)
        self.total_weight = 0
        self.contributors: set[int] = set()
        self._updates: list[ClientUpdate] = []

    def accumulate(self, update: ClientUpdate) -> "AggregatorState":
        if update.round != self.round:
            raise AggregationError(
                f"round mismatch: aggregator at {self.round}, update from {update.round}"
            )
        if update.client_id in self.contributors:
            raise AggregationError(f"duplicate contribution from client {update.client_id}")
        if update.delta.size != self.model_len:
            raise ParamError(
                f"delta length {update.delta.size} != model length {self.model_len}"
            )
        self.weighted_sum += update.n_k * update.delta
        self.total_weight += update.n_k
        self.contributors.add(update.client_id)
        self._updates.append(update)
        return self

    def merge(self, other: "AggregatorState") -> "AggregatorState":
        """Combine two partial aggregations over disjoint contributor sets."""
        if other.round != self.round:
            raise AggregationError(
                f"round mismatch in merge: {self.round} vs {other.round}"
            )
        if other.model_len != self.model_len:
            raise ParamError("model length mismatch in merge")
        overlap = self.contributors & other.contributors
        if overlap:
            raise AggregationError(f"overlapping contributors in merge: {sorted(overlap)}")
        out = AggregatorState(self.round, self.model_len, deterministic=self.deterministic)
        out.weighted_sum = self.weighted_sum + other.weighted_sum
        out.total_weight = self.total_weight + other.total_weight
        out.contributors = self.contributors | other.contributors
        out._updates = self._updates + other._updates
        return out

    @property
    def updates(self) -> list[ClientUpdate]:
        return list(self._updates)

    def weights(self) -> dict[int, float]:
        """Normalized per-client weights over received contributions."""
        if not self.contributors:
            return {}
        return {u.client_id: u.n_k / self.total_weight for u in self._updates}

    def finalize(self) -> np.ndarray:
        """Weighted mean of received deltas: the round's pseudo-gradient."""
        if not self.contributors:
            raise AggregationError(f"finalize on empty aggregator for round {self.round}")
        if len(self._updates) == 1:
            return self._updates[0].delta.copy()
        if self.deterministic:
            ordered = sorted(self._updates, key=lambda u: u.client_id)
            terms = [u.n_k * u.delta for u in ordered]
            while len(terms) > 1:
                paired = [terms[i] + terms[i + 1] for i in range(0, len(terms) - 1, 2)]
                if len(terms) % 2:
                    paired.append(terms[-1])
                terms = paired
            return terms[0] / self.total_weight
        return self.weighted_sum / self.total_weight


@dataclass
class ServerOptState:
    """Server-side Nesterov momentum over the pseudo-gradient stream."""

    momentum: ParamVector
    eta: float
    mu: float
    nesterov: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ParamError(f"server eta must be > 0, got {self.eta}")
        if not 0 <= self.mu < 1:
            raise ParamError(f"server mu must be in [0, 1), got {self.mu}")

    @classmethod
    def fresh(cls, model_len: int, eta: float, mu: float, nesterov: bool = True) -> "ServerOptState":
        return cls(ParamVector.zeros(model_len), eta, mu, nesterov)


def server_step(
    opt: ServerOptState,
    w_prev: ParamVector,
    delta: np.ndarray,
    round_num: Optional[int] = None,
) -> tuple[ParamVector, ServerOptState]:
    """Apply one federated optimizer step to the pseudo-gradient.

    m' = mu*m + delta
    nesterov: w' = w - eta * (mu*m' + delta); plain: w' = w - eta * m'

    Math runs in float64; the new momentum is materialized to float32 first and
    that materialized value feeds the weight update, so a run resumed from a
    checkpoint retraces the original bit-for-bit. With mu=0 and eta=1 the step
    reduces to plain FedAvg and reconstructs the weighted client mean exactly.
    """
    delta = np.ascontiguousarray(delta, dtype=np.float64)
    if len(w_prev) != delta.size or len(opt.momentum) != delta.size:
        raise ParamError(
            f"server_step length mismatch: w={len(w_prev)}, delta={delta.size}, "
            f"momentum={len(opt.momentum)}"
        )
    m_new64 = opt.mu * opt.momentum.as_f64() + delta
    with np.errstate(over="ignore"):
        m_new = ParamVector(m_new64.astype(np.float32), check=False)
        if opt.nesterov:
            update = opt.eta * (opt.mu * m_new.as_f64() + delta)
        else:
            update = opt.eta * m_new.as_f64()
        w_new_arr = (w_prev.as_f64() - update).astype(np.float32)
    if not np.isfinite(w_new_arr).all():
        where = f" in round {round_num}" if round_num is not None else ""
        raise ParamError(f"non-finite global model after server step{where}")
    require_finite(m_new.data, "server momentum")
    return ParamVector(w_new_arr, check=False), replace(opt, momentum=m_new)


@dataclass
class SamplerState:
    """Deterministic client sampler: same (seed, round, pool) -> same selection."""

    seed: int
    round: int = 0
    fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ParamError(f"participation fraction must be in (0, 1], got {self.fraction}")


def sample_clients(state: SamplerState, pool: Sequence[int]) -> list[int]:
    """Select round participants from the pool, in canonical id order."""
    if not pool:
        raise ParamError("client pool is empty")
    ordered = sorted(pool)
    if state.fraction >= 1.0:
        return ordered
    k = math.ceil(state.fraction * len(ordered))
    rng = np.random.default_rng([state.seed & 0xFFFFFFFFFFFFFFFF, state.round])
    picked = rng.choice(len(ordered), size=k, replace=False)
    return sorted(ordered[i] for i in picked)
