"""Command-line entry points: run, resume, baseline, estimate-comm, export.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration/arguments.
The blob store root defaults to $FEDFORGE_STORE when --store is omitted.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .cluster import NoCheckpointError, ServerCrashed, resume_training, run_training
from .comm import NetworkModel, transfer_time
from .config import ConfigError, parse_config
from .metrics import SCOPES, MetricsArchive, write_csv
from .store import FileBlobStore, open_store


def _store_root(args) -> str | None:
    return args.store or os.environ.get("FEDFORGE_STORE")


def _cmd_run(args) -> int:
    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    root = _store_root(args)
    if root:
        config = replace(
            config, runtime=replace(config.runtime, mode="fs", blob_root=root)
        )
    store = open_store(config.runtime.mode, config.runtime.blob_root)
    archive = None
    if config.runtime.mode == "fs":
        archive = MetricsArchive(os.path.join(config.runtime.blob_root, "metrics.jsonl"))
    try:
        result = run_training(config, store, archive=archive)
    except ServerCrashed as exc:
        print(f"run interrupted: {exc}", file=sys.stderr)
        return 1
    final = result.archive.rows("server_round")
    if final:
        print(f"completed {result.state.round} rounds; "
              f"final validation perplexity {final[-1].values['perplexity']:.3f}")
    else:
        print(f"completed {result.state.round} rounds (initial checkpoint only)")
    return 0


def _cmd_resume(args) -> int:
    root = _store_root(args)
    if not root:
        print("resume requires --store or $FEDFORGE_STORE", file=sys.stderr)
        return 2
    store = FileBlobStore(root)
    archive = MetricsArchive(os.path.join(root, "metrics.jsonl"))
    try:
        result = resume_training(store, archive=archive)
    except NoCheckpointError:
        print("no checkpoint found", file=sys.stderr)
        return 2
    except ServerCrashed as exc:
        print(f"run interrupted: {exc}", file=sys.stderr)
        return 1
    print(f"resumed and completed {result.state.round} rounds")
    return 0


def _cmd_baseline(args) -> int:
    from .trainer import run_baseline  # torch import deferred to use

    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    archive = MetricsArchive(args.metrics) if args.metrics else None
    result = run_baseline(config, reset_every=args.reset_every, archive=archive)
    print(f"baseline final validation perplexity {result.final_perplexity:.3f}")
    return 0


def _cmd_estimate_comm(args) -> int:
    net = NetworkModel(
        bandwidth_bps=args.bandwidth_mbps * 1e6,
        latency_s=args.latency_s,
        bytes_per_param=args.bytes_per_param,
    )
    seconds = transfer_time(args.params, net)
    print(f"{seconds:.1f} s")
    return 0


def _cmd_export(args) -> int:
    root = _store_root(args)
    if not root:
        print("export requires --store or $FEDFORGE_STORE", file=sys.stderr)
        return 2
    path = os.path.join(root, "metrics.jsonl")
    if not os.path.exists(path):
        print(f"no metrics archive at {path}", file=sys.stderr)
        return 2
    archive = MetricsArchive.load(path)
    out_dir = args.out or root
    os.makedirs(out_dir, exist_ok=True)
    scopes = [args.scope] if args.scope else list(SCOPES)
    for scope in scopes:
        out = os.path.join(out_dir, f"{scope}.csv")
        write_csv(archive, scope, out)
        print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--store", help="filesystem blob root (overrides config)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("resume", help="resume from the latest server checkpoint")
    p.add_argument("--store")
    p.set_defaults(fn=_cmd_resume)

    p = sub.add_parser("baseline", help="centralized baseline with the same local pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--reset-every", type=int, default=None,
                   help="reset the optimizer every N steps (mirrors federated rounds)")
    p.add_argument("--metrics", help="JSONL file for the metrics archive")
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("estimate-comm", help="analytical model-update transfer time")
    p.add_argument("--params", type=int, required=True)
    p.add_argument("--bytes-per-param", type=int, default=2)
    p.add_argument("--bandwidth-mbps", type=float, required=True)
    p.add_argument("--latency-s", type=float, default=0.0)
    p.set_defaults(fn=_cmd_estimate_comm)

    p = sub.add_parser("export", help="export metrics CSVs from a filesystem store")
    p.add_argument("--store")
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--out", help="output directory (defaults to the store root)")
    p.set_defaults(fn=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
