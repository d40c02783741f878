"""fedforge: desk-scale federated pre-training of a tiny causal language model.

A parameter-server orchestrator aggregates weighted client deltas into a
pseudo-gradient and applies server-side Nesterov momentum; node managers train
local models with AdamW under a shared warmup+cosine schedule; models move
through a write-once blob store; every run is crash-resumable from server
checkpoints and exports per-step/per-round telemetry as CSV.
"""

from .cluster import resume_training, run_training
from .comm import NetworkModel, transfer_time
from .config import ExperimentConfig, parse_config, validate_config
from .fedopt import (
    AggregatorState,
    ClientUpdate,
    SamplerState,
    ServerOptState,
    client_weight,
    sample_clients,
    server_step,
)
from .localopt import AdamWConfig, AdamWState, ScheduleConfig, adamw_step, clip_grad, lr_at, perplexity
from .model import LossEvaluator, TinyLMConfig, alibi_bias
from .params import LayoutManifest, ParamVector, axpy, l2_norm, read_checkpoint, write_checkpoint
from .store import FileBlobStore, MemoryBlobStore
from .trainer import run_baseline, train_round

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "AdamWState",
    "AggregatorState",
    "ClientUpdate",
    "ExperimentConfig",
    "FileBlobStore",
    "LayoutManifest",
    "LossEvaluator",
    "MemoryBlobStore",
    "NetworkModel",
    "ParamVector",
    "SamplerState",
    "ScheduleConfig",
    "ServerOptState",
    "TinyLMConfig",
    "adamw_step",
    "alibi_bias",
    "axpy",
    "client_weight",
    "clip_grad",
    "l2_norm",
    "lr_at",
    "parse_config",
    "perplexity",
    "read_checkpoint",
    "resume_training",
    "run_baseline",
    "run_training",
    "sample_clients",
    "server_step",
    "train_round",
    "transfer_time",
    "validate_config",
    "write_checkpoint",
]
