"""Server-side state: the checkpointed quadruple (round, sampler, global model,
server optimizer state) plus the node-manager roster, and the blob helpers for
publishing models and writing/restoring crash-consistent checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .fedopt import SamplerState, ServerOptState
from .params import (
    LayoutManifest,
    ParamVector,
    decode_sections,
    encode_sections,
)
from .store import (
    BlobExistsError,
    BlobStore,
    global_model_key,
    parse_key,
    server_checkpoint_key,
)


class RosterError(ValueError):
    pass


@dataclass(frozen=True)
class NodeManagerInfo:
    """One machine's agent: a fixed number of worker slots, one client per slot."""

    id: str
    worker_slots: int
    clients: tuple[int, ...]

    def __post_init__(self):
        if self.worker_slots < 1:
            raise RosterError(f"manager {self.id!r} must have at least one worker slot")
        if len(self.clients) > self.worker_slots:
            raise RosterError(
                f"manager {self.id!r} oversubscribed: {len(self.clients)} clients "
                f"on {self.worker_slots} slots"
            )


@dataclass
class ServerState:
    round: int  # number of completed rounds
    params: ParamVector
    opt: ServerOptState
    sampler: SamplerState
    roster: dict[str, NodeManagerInfo] = field(default_factory=dict)

    def active_clients(self) -> list[int]:
        return sorted(c for nm in self.roster.values() for c in nm.clients)

    def add_manager(self, nm: NodeManagerInfo) -> None:
        if nm.id in self.roster:
            raise RosterError(f"manager {nm.id!r} already in roster")
        self.roster[nm.id] = nm

    def remove_manager(self, nm_id: str) -> NodeManagerInfo:
        if nm_id not in self.roster:
            raise RosterError(f"manager {nm_id!r} not in roster")
        return self.roster.pop(nm_id)


def put_or_verify(store: BlobStore, key: str, data: bytes) -> None:
    """Idempotent publication: a retry that reproduces identical bytes is a
    no-op; divergent bytes under one key signal a protocol bug."""
    try:
        store.put(key, data)
    except BlobExistsError:
        if store.get(key) != data:
            raise


def publish_global(store: BlobStore, round_num: int, params: ParamVector,
                   manifest: LayoutManifest) -> str:
    key = global_model_key(round_num)
    blob = encode_sections(
        {"round": round_num, "params": params, "manifest": manifest.to_json_dict()}
    )
    put_or_verify(store, key, blob)
    return key


def fetch_global(store: BlobStore, key: str) -> ParamVector:
    sections = decode_sections(store.get(key))
    return sections["params"]


def checkpoint_server(
    state: ServerState,
    store: BlobStore,
    manifest: LayoutManifest,
    config_dict: dict[str, Any],
    config_hash: str,
) -> str:
    """Write the round-boundary checkpoint; returns the blob key."""
    key = server_checkpoint_key(state.round)
    sections = {
        "round": state.round,
        "global": state.params,
        "momentum": state.opt.momentum,
        "server_opt": {
            "eta": state.opt.eta,
            "mu": state.opt.mu,
            "nesterov": state.opt.nesterov,
        },
        "sampler": {
            "seed": state.sampler.seed,
            "round": state.sampler.round,
            "fraction": state.sampler.fraction,
        },
        "roster": {
            nm.id: {"worker_slots": nm.worker_slots, "clients": list(nm.clients)}
            for nm in state.roster.values()
        },
        "config": config_dict,
        "config_hash": config_hash,
        "manifest": manifest.to_json_dict(),
    }
    put_or_verify(store, key, encode_sections(sections))
    return key


@dataclass(frozen=True)
class RestoredServer:
    state: ServerState
    config_dict: dict[str, Any]
    config_hash: str
    manifest: LayoutManifest


def restore_server(store: BlobStore) -> Optional[RestoredServer]:
    """Load the latest round-boundary checkpoint, or None for a fresh start."""
    candidates = []
    for key in store.list("ckpt/"):
        parsed = parse_key(key)
        if parsed.kind == "server_ckpt":
            candidates.append((parsed.round, key))
    if not candidates:
        return None
    _, latest = max(candidates)
    sections = decode_sections(store.get(latest))
    opt_meta = sections["server_opt"]
    sampler_meta = sections["sampler"]
    roster = {
        nm_id: NodeManagerInfo(nm_id, meta["worker_slots"], tuple(meta["clients"]))
        for nm_id, meta in sections["roster"].items()
    }
    state = ServerState(
        round=int(sections["round"]),
        params=sections["global"],
        opt=ServerOptState(
            momentum=sections["momentum"],
            eta=opt_meta["eta"],
            mu=opt_meta["mu"],
            nesterov=opt_meta["nesterov"],
        ),
        sampler=SamplerState(
            seed=int(sampler_meta["seed"]),
            round=int(sampler_meta["round"]),
            fraction=sampler_meta["fraction"],
        ),
        roster=roster,
    )
    return RestoredServer(
        state=state,
        config_dict=sections["config"],
        config_hash=sections["config_hash"],
        manifest=LayoutManifest.from_json_dict(sections["manifest"]),
    )


class EventLog:
    """Append-only audit log of server state transitions."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.entries: list[dict[str, Any]] = []

    def emit(self, round_num: int, event: str, **detail: Any) -> None:
        entry = {"ts": time.time(), "round": round_num, "event": event, "detail": detail}
        self.entries.append(entry)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def of_kind(self, event: str) -> list[dict[str, Any]]:
        return [e for e in self.entries if e["event"] == event]
