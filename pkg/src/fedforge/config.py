"""Experiment configuration: JSON files validated into typed sections.

Validation is strict: unknown keys are rejected and every error names the full
field path (e.g. "federation.local_steps: must be >= 1"). The resolved config
(defaults included) is what gets hashed and stored in server checkpoints, so a
resumed run provably uses the same recipe.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .localopt import AdamWConfig, ScheduleConfig
from .model import TinyLMConfig
from .params import ParamError

FAULT_KINDS = ("worker_crash", "node_manager_drop", "server_crash", "node_manager_join")
FAULT_PHASES = ("pre_dispatch", "mid_train", "post_checkpoint")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class _Section:
    """A dict view that type-checks reads and rejects unknown keys."""

    def __init__(self, raw: Any, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
        self.raw = raw
        self.path = path
        self._seen: set[str] = set()

    def _get(self, key: str, default):
        self._seen.add(key)
        return self.raw.get(key, default)

    def child(self, key: str, required: bool = False) -> Optional["_Section"]:
        raw = self._get(key, None)
        if raw is None:
            if required:
                raise ConfigError(f"{self.path}.{key}", "section is required")
            return None
        return _Section(raw, f"{self.path}.{key}")

    def number(self, key: str, default, *, minimum=None, maximum=None, integer=False):
        v = self._get(key, default)
        if v is None:
            return None
        where = f"{self.path}.{key}"
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(where, f"expected a number, got {v!r}")
        if integer and not isinstance(v, int):
            raise ConfigError(where, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            raise ConfigError(where, f"must be >= {minimum}, got {v}")
        if maximum is not None and v > maximum:
            raise ConfigError(where, f"must be <= {maximum}, got {v}")
        return v

    def boolean(self, key: str, default: bool) -> bool:
        v = self._get(key, default)
        if not isinstance(v, bool):
            raise ConfigError(f"{self.path}.{key}", f"expected a boolean, got {v!r}")
        return v

    def string(self, key: str, default, choices=None):
        v = self._get(key, default)
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"{self.path}.{key}", f"expected a string, got {v!r}")
        if choices and v not in choices:
            raise ConfigError(f"{self.path}.{key}", f"must be one of {sorted(choices)}, got {v!r}")
        return v

    def int_map(self, key: str) -> dict[int, int]:
        v = self._get(key, {})
        where = f"{self.path}.{key}"
        if not isinstance(v, dict):
            raise ConfigError(where, f"expected an object, got {v!r}")
        out = {}
        for k, val in v.items():
            try:
                ik = int(k)
            except ValueError:
                raise ConfigError(where, f"keys must be integers, got {k!r}") from None
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise ConfigError(where, f"values must be integers >= 1, got {val!r}")
            out[ik] = val
        return out

    def list_of(self, key: str) -> list:
        v = self._get(key, [])
        if not isinstance(v, list):
            raise ConfigError(f"{self.path}.{key}", f"expected a list, got {v!r}")
        return v

    def finish(self) -> None:
        unknown = set(self.raw) - self._seen
        if unknown:
            raise ConfigError(
                f"{self.path}.{sorted(unknown)[0]}", "unknown configuration key"
            )


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 8
    rounds: int = 20
    local_steps: int = 50
    server_eta: float = 0.1
    server_mu: float = 0.9
    nesterov: bool = True
    sampler_seed: int = 7
    sample_fraction: float = 1.0
    initial_clients: Optional[int] = None  # managers active at round 1; rest may join
    local_step_overrides: dict[int, int] = field(default_factory=dict)  # stragglers


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic-markov"  # synthetic-markov | synthetic-phrases | file
    path: Optional[str] = None
    seed: int = 99
    n_bytes: int = 400_000
    sequence_len: int = 64
    validation_fraction: float = 0.05
    batch_size: int = 16
    micro_batches: int = 1
    eval_batches: int = 8


@dataclass(frozen=True)
class RuntimeConfig:
    mode: str = "memory"  # memory | fs
    blob_root: Optional[str] = None
    deterministic: bool = True
    checkpoint_every: int = 1
    checkpoint_partial_aggregates: bool = False
    round_deadline_s: Optional[float] = None
    worker_crash_policy: str = "retry"  # retry | drop


@dataclass(frozen=True)
class FaultConfig:
    kind: str
    round: int
    phase: str
    target: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: TinyLMConfig
    schedule: ScheduleConfig
    adamw: AdamWConfig
    federation: FederationConfig
    data: DataConfig
    runtime: RuntimeConfig
    faults: tuple[FaultConfig, ...] = ()

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "model": {
                "vocab_size": self.model.vocab_size,
                "context_len": self.model.context_len,
                "n_layers": self.model.n_layers,
                "d_model": self.model.d_model,
                "n_heads": self.model.n_heads,
                "use_alibi": self.model.use_alibi,
                "seed": self.model.seed,
            },
            "schedule": {
                "base_lr": self.schedule.base_lr,
                "warmup_steps": self.schedule.warmup_steps,
                "t_max": self.schedule.t_max,
                "alpha_f": self.schedule.alpha_f,
            },
            "adamw": {
                "beta1": self.adamw.beta1,
                "beta2": self.adamw.beta2,
                "eps": self.adamw.eps,
                "weight_decay": self.adamw.weight_decay,
                "clip_norm": self.adamw.clip_norm,
            },
            "federation": {
                "n_clients": self.federation.n_clients,
                "rounds": self.federation.rounds,
                "local_steps": self.federation.local_steps,
                "server_eta": self.federation.server_eta,
                "server_mu": self.federation.server_mu,
                "nesterov": self.federation.nesterov,
                "sampler_seed": self.federation.sampler_seed,
                "sample_fraction": self.federation.sample_fraction,
                "initial_clients": self.federation.initial_clients,
                "local_step_overrides": {
                    str(k): v for k, v in sorted(self.federation.local_step_overrides.items())
                },
            },
            "data": {
                "source": self.data.source,
                "path": self.data.path,
                "seed": self.data.seed,
                "n_bytes": self.data.n_bytes,
                "sequence_len": self.data.sequence_len,
                "validation_fraction": self.data.validation_fraction,
                "batch_size": self.data.batch_size,
                "micro_batches": self.data.micro_batches,
                "eval_batches": self.data.eval_batches,
            },
            "runtime": {
                "mode": self.runtime.mode,
                "blob_root": self.runtime.blob_root,
                "deterministic": self.runtime.deterministic,
                "checkpoint_every": self.runtime.checkpoint_every,
                "checkpoint_partial_aggregates": self.runtime.checkpoint_partial_aggregates,
                "round_deadline_s": self.runtime.round_deadline_s,
                "worker_crash_policy": self.runtime.worker_crash_policy,
            },
            "faults": [
                {"kind": f.kind, "round": f.round, "phase": f.phase, "target": f.target}
                for f in self.faults
            ],
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def validate_config(raw: dict[str, Any]) -> ExperimentConfig:
    top = _Section(raw, "config")

    m = top.child("model") or _Section({}, "config.model")
    try:
        model = TinyLMConfig(
            vocab_size=m.number("vocab_size", 256, minimum=2, integer=True),
            context_len=m.number("context_len", 64, minimum=2, integer=True),
            n_layers=m.number("n_layers", 2, minimum=1, integer=True),
            d_model=m.number("d_model", 64, minimum=1, integer=True),
            n_heads=m.number("n_heads", 4, minimum=1, integer=True),
            use_alibi=m.boolean("use_alibi", True),
            seed=m.number("seed", 1234, minimum=0, integer=True),
        )
    except ParamError as exc:
        raise ConfigError("config.model", str(exc)) from exc
    m.finish()

    s = top.child("schedule") or _Section({}, "config.schedule")
    try:
        schedule = ScheduleConfig(
            base_lr=float(s.number("base_lr", 4e-4, minimum=0.0)),
            warmup_steps=s.number("warmup_steps", 100, minimum=0, integer=True),
            t_max=s.number("t_max", 10_000, minimum=1, integer=True),
            alpha_f=float(s.number("alpha_f", 1e-6, minimum=0.0, maximum=1.0)),
        )
    except ParamError as exc:
        raise ConfigError("config.schedule", str(exc)) from exc
    s.finish()

    a = top.child("adamw") or _Section({}, "config.adamw")
    try:
        adamw = AdamWConfig(
            beta1=float(a.number("beta1", 0.9, minimum=0.0)),
            beta2=float(a.number("beta2", 0.95, minimum=0.0)),
            eps=float(a.number("eps", 1e-8)),
            weight_decay=float(a.number("weight_decay", 1e-5, minimum=0.0)),
            clip_norm=float(a.number("clip_norm", 1.0)),
        )
    except ParamError as exc:
        raise ConfigError("config.adamw", str(exc)) from exc
    a.finish()

    f = top.child("federation") or _Section({}, "config.federation")
    federation = FederationConfig(
        n_clients=f.number("n_clients", 8, minimum=1, integer=True),
        rounds=f.number("rounds", 20, minimum=0, integer=True),
        local_steps=f.number("local_steps", 50, minimum=1, integer=True),
        server_eta=float(f.number("server_eta", 0.1)),
        server_mu=float(f.number("server_mu", 0.9, minimum=0.0)),
        nesterov=f.boolean("nesterov", True),
        sampler_seed=f.number("sampler_seed", 7, minimum=0, integer=True),
        sample_fraction=float(f.number("sample_fraction", 1.0)),
        initial_clients=f.number("initial_clients", None, minimum=1, integer=True),
        local_step_overrides=f.int_map("local_step_overrides"),
    )
    f.finish()
    if federation.server_eta <= 0:
        raise ConfigError("config.federation.server_eta", "must be > 0")
    if not 0 <= federation.server_mu < 1:
        raise ConfigError("config.federation.server_mu", "must be in [0, 1)")
    if not 0 < federation.sample_fraction <= 1:
        raise ConfigError("config.federation.sample_fraction", "must be in (0, 1]")
    if federation.initial_clients is not None and federation.initial_clients > federation.n_clients:
        raise ConfigError("config.federation.initial_clients", "cannot exceed n_clients")
    for cid in federation.local_step_overrides:
        if not 0 <= cid < federation.n_clients:
            raise ConfigError(
                "config.federation.local_step_overrides", f"client id {cid} out of range"
            )

    d = top.child("data") or _Section({}, "config.data")
    data = DataConfig(
        source=d.string(
            "source", "synthetic-markov", choices=("synthetic-markov", "synthetic-phrases", "file")
        ),
        path=d.string("path", None),
        seed=d.number("seed", 99, minimum=0, integer=True),
        n_bytes=d.number("n_bytes", 400_000, minimum=1, integer=True),
        sequence_len=d.number("sequence_len", 64, minimum=2, integer=True),
        validation_fraction=float(d.number("validation_fraction", 0.05, minimum=0.0)),
        batch_size=d.number("batch_size", 16, minimum=1, integer=True),
        micro_batches=d.number("micro_batches", 1, minimum=1, integer=True),
        eval_batches=d.number("eval_batches", 8, minimum=1, integer=True),
    )
    d.finish()
    if data.source == "file" and not data.path:
        raise ConfigError("config.data.path", "required when source is 'file'")
    if data.validation_fraction >= 1:
        raise ConfigError("config.data.validation_fraction", "must be < 1")
    if data.sequence_len > model.context_len:
        raise ConfigError(
            "config.data.sequence_len", f"exceeds model context_len {model.context_len}"
        )

    r = top.child("runtime") or _Section({}, "config.runtime")
    runtime = RuntimeConfig(
        mode=r.string("mode", "memory", choices=("memory", "fs")),
        blob_root=r.string("blob_root", None),
        deterministic=r.boolean("deterministic", True),
        checkpoint_every=r.number("checkpoint_every", 1, minimum=1, integer=True),
        checkpoint_partial_aggregates=r.boolean("checkpoint_partial_aggregates", False),
        round_deadline_s=r.number("round_deadline_s", None, minimum=0.0),
        worker_crash_policy=r.string("worker_crash_policy", "retry", choices=("retry", "drop")),
    )
    r.finish()
    if runtime.mode == "fs" and not runtime.blob_root:
        raise ConfigError("config.runtime.blob_root", "required when mode is 'fs'")

    faults = []
    for i, raw_fault in enumerate(top.list_of("faults")):
        fs = _Section(raw_fault, f"config.faults[{i}]")
        fault = FaultConfig(
            kind=fs.string("kind", None, choices=FAULT_KINDS),
            round=fs.number("round", None, minimum=1, integer=True),
            phase=fs.string("phase", None, choices=FAULT_PHASES),
            target=fs.string("target", None),
        )
        fs.finish()
        if fault.kind is None:
            raise ConfigError(f"config.faults[{i}].kind", "fault kind is required")
        if fault.round is None:
            raise ConfigError(f"config.faults[{i}].round", "fault round is required")
        if fault.phase is None:
            raise ConfigError(f"config.faults[{i}].phase", "fault phase is required")
        faults.append(fault)

    top.finish()
    return ExperimentConfig(model, schedule, adamw, federation, data, runtime, tuple(faults))


def parse_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return validate_config(raw)


def config_from_json_dict(raw: dict[str, Any]) -> ExperimentConfig:
    """Rebuild a config from its resolved to_json_dict form (checkpoint resume)."""
    return validate_config(raw)
