"""Telemetry capture and export.

One MetricsRecord per (scope, round, client, step) key; scalars are a named
map so scopes carry only the quantities they produce. CSV export is a pure
function of the archive: fixed column order, rows sorted by key, byte-stable
across re-exports.
"""

from __future__ import annotations

import io
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .params import ParamError, ParamVector, l2_norm

SCOPES = ("server_round", "client_step", "client_round", "eval")

# Canonical scalar column order for exports; extra names follow alphabetically.
SCALAR_COLUMNS = (
    "loss",
    "perplexity",
    "lr",
    "grad_norm_raw",
    "grad_norm_applied",
    "pseudograd_norm",
    "global_norm",
    "avg_client_norm",
    "momentum_norm",
    "param_norm",
)


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRecord:
    scope: str
    round: int
    client_id: Optional[int] = None
    step: Optional[int] = None
    values: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise MetricsError(f"unknown scope {self.scope!r}")
        for name, v in self.values.items():
            if not isinstance(v, (int, float)) or not math.isfinite(float(v)):
                raise MetricsError(f"non-finite scalar {name}={v!r} in {self.scope} record")

    @property
    def key(self) -> tuple:
        return (self.scope, self.round, self.client_id, self.step)


class MetricsArchive:
    """Append-only record sink with unique-key enforcement.

    When backed by a path, records are flushed to a JSON-lines file whenever
    flush() is called (the runtime calls it at round boundaries).
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._records: list[MetricsRecord] = []
        self._keys: set[tuple] = set()
        self._flushed = 0
        self._lock = threading.Lock()

    def record(self, rec: MetricsRecord) -> None:
        with self._lock:
            if rec.key in self._keys:
                raise MetricsError(f"duplicate metrics record for key {rec.key}")
            self._keys.add(rec.key)
            self._records.append(rec)

    def rows(self, scope: Optional[str] = None) -> list[MetricsRecord]:
        with self._lock:
            if scope is None:
                return list(self._records)
            return [r for r in self._records if r.scope == scope]

    def flush(self) -> None:
        if self.path is None:
            return
        with self._lock:
            pending = self._records[self._flushed :]
            if not pending:
                return
            with open(self.path, "a", encoding="utf-8") as fh:
                for rec in pending:
                    fh.write(
                        json.dumps(
                            {
                                "scope": rec.scope,
                                "round": rec.round,
                                "client_id": rec.client_id,
                                "step": rec.step,
                                "values": rec.values,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
            self._flushed = len(self._records)

    @classmethod
    def load(cls, path: str) -> "MetricsArchive":
        archive = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                archive.record(
                    MetricsRecord(
                        d["scope"], d["round"], d["client_id"], d["step"], d["values"]
                    )
                )
        return archive


def _sort_key(rec: MetricsRecord) -> tuple:
    return (
        rec.round,
        rec.client_id if rec.client_id is not None else -1,
        rec.step if rec.step is not None else -1,
    )


def export_csv(archive: MetricsArchive, scope: str) -> str:
    """Render one scope as CSV text; header only if the scope is empty."""
    if scope not in SCOPES:
        raise MetricsError(f"unknown scope {scope!r}")
    rows = sorted(archive.rows(scope), key=_sort_key)
    extra = sorted({name for r in rows for name in r.values} - set(SCALAR_COLUMNS))
    columns = list(SCALAR_COLUMNS) + extra
    out = io.StringIO()
    out.write(",".join(["scope", "round", "client_id", "step"] + columns) + "\n")
    for r in rows:
        cells = [
            r.scope,
            str(r.round),
            "" if r.client_id is None else str(r.client_id),
            "" if r.step is None else str(r.step),
        ]
        for c in columns:
            v = r.values.get(c)
            cells.append("" if v is None else repr(float(v)))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def write_csv(archive: MetricsArchive, scope: str, path: str) -> str:
    text = export_csv(archive, scope)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


@dataclass(frozen=True)
class RoundNorms:
    global_norm: float
    per_client_norms: dict[int, float]
    avg_client_norm: float
    momentum_norm: float
    pseudograd_norm: float


def compute_round_norms(
    w_global: ParamVector,
    client_vectors: Sequence[np.ndarray] | Sequence[ParamVector],
    weights: Sequence[float],
    momentum: ParamVector,
    client_ids: Optional[Sequence[int]] = None,
    *,
    vectors_are_deltas: bool = True,
) -> RoundNorms:
    """Norm telemetry for one round.

    w_global is the model the clients started from. With deltas, client models
    are reconstructed as w_global - delta_k. avg_client_norm is the norm of the
    weighted average of client models (not the average of norms); the
    pseudo-gradient is the weighted average of deltas.
    """
    if len(client_vectors) != len(weights) or not client_vectors:
        raise MetricsError("need one weight per client vector")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise MetricsError(f"client weights must sum to 1, got {sum(weights)}")
    ids = list(client_ids) if client_ids is not None else list(range(len(client_vectors)))
    w64 = w_global.as_f64()
    models = []
    for vec in client_vectors:
        arr = vec.as_f64() if isinstance(vec, ParamVector) else np.asarray(vec, dtype=np.float64)
        if arr.size != w64.size:
            raise ParamError(f"client vector length {arr.size} != model length {w64.size}")
        models.append(w64 - arr if vectors_are_deltas else arr)
    avg_model = np.zeros_like(w64)
    for w, m in zip(weights, models):
        avg_model += w * m
    pseudograd = w64 - avg_model
    return RoundNorms(
        global_norm=l2_norm(w_global),
        per_client_norms={i: l2_norm(m) for i, m in zip(ids, models)},
        avg_client_norm=float(np.sqrt(np.dot(avg_model, avg_model))),
        momentum_norm=l2_norm(momentum),
        pseudograd_norm=float(np.sqrt(np.dot(pseudograd, pseudograd))),
    )
