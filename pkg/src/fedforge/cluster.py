"""The federated runtime: round lifecycle, node-manager/worker execution,
asynchronous aggregation, fault injection, dropout/join handling, and
crash-consistent checkpoint/resume.

Node managers run as threads (one worker thread per slot); the server is the
single decision thread fed by an intake queue of encoded control frames. Bulk
data moves through the blob store only. In deterministic mode aggregation
buffers updates and reduces them in canonical client order, so the final model
is bit-identical regardless of arrival order and of where a run was resumed.
"""

from __future__ import annotations

import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import torch

from .config import ExperimentConfig, FaultConfig, config_from_json_dict
from .data import BatchIterator, TokenizedCorpus
from .fedopt import (
    AggregationError,
    AggregatorState,
    ClientUpdate,
    SamplerState,
    ServerOptState,
    sample_clients,
    server_step,
)
from .localopt import perplexity
from .messages import (
    ControlMessage,
    Heartbeat,
    Join,
    Leave,
    TrainTask,
    UpdateReady,
    decode_message,
    encode_message,
)
from .metrics import MetricsArchive, MetricsRecord, compute_round_norms
from .model import LossEvaluator
from .params import ParamVector, decode_sections, encode_sections, l2_norm
from .server import (
    EventLog,
    NodeManagerInfo,
    RestoredServer,
    ServerState,
    checkpoint_server,
    fetch_global,
    publish_global,
    put_or_verify,
    restore_server,
)
from .store import BlobStore, client_update_key, open_store
from .trainer import build_corpus, build_split, evaluate_mean_ce, train_round


class WorkerCrashed(RuntimeError):
    """Injected worker failure."""


class ManagerDropped(RuntimeError):
    """Injected node-manager failure."""


class ServerCrashed(RuntimeError):
    """Injected server failure; training resumes from the latest checkpoint."""

    def __init__(self, round_num: int, phase: str):
        super().__init__(f"server crashed at round {round_num} ({phase})")
        self.round = round_num
        self.phase = phase


class RoundAbortedError(RuntimeError):
    pass


class AllManagersLostError(RuntimeError):
    pass


class ResumeMismatchError(RuntimeError):
    pass


class NoCheckpointError(RuntimeError):
    """Fresh-start signal: the store holds no server checkpoint."""


@dataclass(frozen=True)
class RoundPlan:
    round: int
    tasks: dict[int, TrainTask]

    def __post_init__(self):
        for cid, t in self.tasks.items():
            if t.client_id != cid or t.round != self.round:
                raise ValueError(f"task for client {cid} is inconsistent with the plan")


class FaultInjector:
    """Deterministically fires configured faults at (round, phase); each spec
    fires at most once."""

    def __init__(self, faults: tuple[FaultConfig, ...] = ()):
        self._armed = list(faults)
        self.fired: list[FaultConfig] = []
        self._lock = threading.Lock()

    def take(self, kind: str, round_num: int, phase: str,
             target: Optional[str] = None) -> Optional[FaultConfig]:
        with self._lock:
            for i, f in enumerate(self._armed):
                if f.kind != kind or f.round != round_num or f.phase != phase:
                    continue
                if f.target is not None and target is not None and f.target != target:
                    continue
                self.fired.append(f)
                return self._armed.pop(i)
        return None

    def pending(self, kind: str, round_num: int, phase: str) -> list[FaultConfig]:
        with self._lock:
            return [
                f for f in self._armed
                if f.kind == kind and f.round == round_num and f.phase == phase
            ]


class ClientWorker:
    """One execution slot: trains its client's rounds, publishes update blobs."""

    def __init__(
        self,
        client_id: int,
        manager_id: str,
        config: ExperimentConfig,
        corpus: TokenizedCorpus,
        shard,
        store: BlobStore,
        injector: FaultInjector,
    ):
        self.client_id = client_id
        self.manager_id = manager_id
        self.config = config
        self.store = store
        self.injector = injector
        self.evaluator = LossEvaluator(config.model)
        self.batches = BatchIterator(corpus, shard, config.data.batch_size, config.data.seed)

    def _fault_hook(self, task: TrainTask):
        fire_step = task.local_steps // 2

        def hook(local_step: int) -> None:
            if local_step != fire_step:
                return
            if self.injector.take("worker_crash", task.round, "mid_train", str(self.client_id)):
                raise WorkerCrashed(f"client {self.client_id} crashed in round {task.round}")
            if self.injector.take("node_manager_drop", task.round, "mid_train", self.manager_id):
                raise ManagerDropped(f"manager {self.manager_id} dropped in round {task.round}")

        return hook

    def execute(self, task: TrainTask) -> UpdateReady:
        params = fetch_global(self.store, task.blob_key)
        update, telemetry = train_round(
            params,
            self.batches,
            self.evaluator,
            self.config.adamw,
            self.config.schedule,
            task,
            step_hook=self._fault_hook(task),
        )
        key = client_update_key(task.round, self.client_id)
        blob = encode_sections(
            {
                "round": task.round,
                "client_id": task.client_id,
                "n_k": update.n_k,
                "delta": update.delta,
                "local_metrics": update.local_metrics,
                "telemetry": [
                    {
                        "step": t.step,
                        "loss": t.loss,
                        "grad_norm_raw": t.grad_norm_raw,
                        "grad_norm_applied": t.grad_norm_applied,
                        "lr": t.lr,
                        "param_norm": t.param_norm,
                    }
                    for t in telemetry
                ],
            }
        )
        put_or_verify(self.store, key, blob)
        return UpdateReady(task.round, self.client_id, update.n_k, key)


class NodeManager:
    """Per-machine agent: decodes task frames, runs workers on its slots, and
    reports results (or its own departure) to the server intake queue."""

    def __init__(self, info: NodeManagerInfo, workers: dict[int, ClientWorker],
                 crash_policy: str):
        missing = set(info.clients) - set(workers)
        if missing:
            raise ValueError(f"manager {info.id!r} missing workers for clients {sorted(missing)}")
        self.info = info
        self.workers = workers
        self.crash_policy = crash_policy
        self.failure: Optional[BaseException] = None
        self.dropped_this_round = False
        self.auto_rejoin = False
        self._executor = ThreadPoolExecutor(
            max_workers=info.worker_slots, thread_name_prefix=info.id
        )

    def dispatch(self, frame: bytes, intake: "queue.Queue[bytes]") -> None:
        task = decode_message(frame)
        assert isinstance(task, TrainTask)
        self._executor.submit(self._run, task, intake)

    def _run(self, task: TrainTask, intake: "queue.Queue[bytes]") -> None:
        worker = self.workers[task.client_id]
        try:
            try:
                msg: ControlMessage = worker.execute(task)
            except WorkerCrashed:
                if self.crash_policy == "retry":
                    msg = worker.execute(task)  # cursor re-seeks; blob put is idempotent
                else:
                    # the client sits the round out; the manager itself is alive
                    # and returns at the next round boundary
                    self.auto_rejoin = True
                    intake.put(encode_message(Leave(self.info.id)))
                    return
            intake.put(encode_message(msg))
        except ManagerDropped:
            intake.put(encode_message(Leave(self.info.id)))
        except BaseException as exc:  # real defect: surface it on the server thread
            self.failure = exc
            intake.put(encode_message(Leave(self.info.id)))

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True, cancel_futures=True)


@dataclass
class RunResult:
    params: ParamVector
    archive: MetricsArchive
    events: EventLog
    state: ServerState
    store: BlobStore


class FederatedRuntime:
    """Drives R federated rounds over a blob store, with full-participation
    sampling by default and per-round checkpoints."""

    def __init__(
        self,
        config: ExperimentConfig,
        store: BlobStore,
        *,
        archive: Optional[MetricsArchive] = None,
        events: Optional[EventLog] = None,
    ):
        torch.set_num_threads(1)
        self.config = config
        self.store = store
        self.archive = archive if archive is not None else MetricsArchive()
        self.events = events if events is not None else EventLog()
        self.injector = FaultInjector(config.faults)
        self.corpus = build_corpus(config)
        self.split = build_split(config, self.corpus)
        self.intake: "queue.Queue[bytes]" = queue.Queue()
        self.eval_model = LossEvaluator(config.model)
        self.manifest = self.eval_model.manifest
        self.managers: dict[str, NodeManager] = {}
        for cid in range(config.federation.n_clients):
            info = NodeManagerInfo(f"nm-{cid}", 1, (cid,))
            worker = ClientWorker(
                cid, info.id, config, self.corpus, self.split.shards[cid], store, self.injector
            )
            self.managers[info.id] = NodeManager(
                info, {cid: worker}, config.runtime.worker_crash_policy
            )
        self._pending_joins: list[str] = []

    # -- state construction -------------------------------------------------

    def fresh_state(self) -> ServerState:
        fed = self.config.federation
        params = self.eval_model.init_params()
        initial = fed.initial_clients if fed.initial_clients is not None else fed.n_clients
        state = ServerState(
            round=0,
            params=params,
            opt=ServerOptState.fresh(len(params), fed.server_eta, fed.server_mu, fed.nesterov),
            sampler=SamplerState(fed.sampler_seed, 0, fed.sample_fraction),
        )
        for cid in range(initial):
            state.add_manager(self.managers[f"nm-{cid}"].info)
        return state

    # -- round machinery -----------------------------------------------------

    def _manager_of(self, client_id: int) -> NodeManager:
        return self.managers[f"nm-{client_id}"]

    def _log_fired(self, fault: FaultConfig, round_num: int, **extra) -> None:
        self.events.emit(round_num, f"fault_{fault.kind}", phase=fault.phase,
                         target=fault.target, **extra)

    def _apply_joins(self, state: ServerState, round_num: int, ids: list[str]) -> None:
        for nm_id in ids:
            if nm_id in state.roster:
                continue
            manager = self.managers.get(nm_id)
            if manager is None:
                self.events.emit(round_num, "join_rejected", manager=nm_id)
                continue
            manager.auto_rejoin = False
            state.add_manager(manager.info)
            self.events.emit(round_num, "manager_joined", manager=nm_id)

    def _pre_dispatch_faults(self, state: ServerState, round_num: int) -> None:
        if self.injector.take("server_crash", round_num, "pre_dispatch"):
            raise ServerCrashed(round_num, "pre_dispatch")
        while True:
            live = sorted(state.roster)
            fault = None
            for candidate in self.injector.pending("node_manager_drop", round_num, "pre_dispatch"):
                target = candidate.target if candidate.target is not None else (live[0] if live else None)
                if target in state.roster:
                    fault = self.injector.take(
                        "node_manager_drop", round_num, "pre_dispatch", target
                    )
                    state.remove_manager(target)
                    self._log_fired(fault, round_num)
                    break
            if fault is None:
                break
        while True:
            gone = sorted(set(self.managers) - set(state.roster))
            fault = None
            for candidate in self.injector.pending("node_manager_join", round_num, "pre_dispatch"):
                target = candidate.target if candidate.target is not None else (gone[0] if gone else None)
                if target is not None and target not in state.roster:
                    fault = self.injector.take(
                        "node_manager_join", round_num, "pre_dispatch", target
                    )
                    self._apply_joins(state, round_num, [target])
                    self._log_fired(fault, round_num)
                    break
            if fault is None:
                break

    def _build_plan(self, state: ServerState, round_num: int, sampled: list[int],
                    blob_key: str) -> RoundPlan:
        fed = self.config.federation
        data = self.config.data
        tasks = {}
        for cid in sampled:
            tasks[cid] = TrainTask(
                round=round_num,
                client_id=cid,
                local_steps=fed.local_step_overrides.get(cid, fed.local_steps),
                schedule_offset=(round_num - 1) * fed.local_steps,
                batch_size=data.batch_size,
                micro_batches=data.micro_batches,
                seeds={"data": data.seed},
                blob_key=blob_key,
            )
        return RoundPlan(round_num, tasks)

    def _read_update(self, msg: UpdateReady) -> tuple[ClientUpdate, list[dict]]:
        sections = decode_sections(self.store.get(msg.blob_key))
        update = ClientUpdate(
            client_id=int(sections["client_id"]),
            round=int(sections["round"]),
            n_k=int(sections["n_k"]),
            delta=sections["delta"],
            local_metrics=sections["local_metrics"],
        )
        return update, sections["telemetry"]

    def _record_client_metrics(self, update: ClientUpdate, telemetry: list[dict]) -> None:
        for row in telemetry:
            values = {k: float(v) for k, v in row.items() if k != "step"}
            values["perplexity"] = perplexity(values["loss"])
            self.archive.record(
                MetricsRecord(
                    "client_step",
                    round=update.round,
                    client_id=update.client_id,
                    step=int(row["step"]),
                    values=values,
                )
            )

    def _collect(self, state: ServerState, round_num: int,
                 expected: set[int]) -> AggregatorState:
        agg = AggregatorState(
            round_num, len(state.params), deterministic=self.config.runtime.deterministic
        )
        telemetry_by_client: dict[int, list[dict]] = {}
        deadline = None
        if self.config.runtime.round_deadline_s is not None:
            deadline = time.monotonic() + self.config.runtime.round_deadline_s
        while expected:
            timeout = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                frame = self.intake.get(timeout=timeout)
            except queue.Empty:
                self.events.emit(round_num, "round_deadline_expired", missing=sorted(expected))
                break
            msg = decode_message(frame)
            if isinstance(msg, UpdateReady):
                if msg.round != round_num:
                    self.events.emit(round_num, "stale_update_ignored",
                                     client=msg.client_id, update_round=msg.round)
                    continue
                if msg.client_id in agg.contributors:
                    self.events.emit(round_num, "duplicate_update_ignored", client=msg.client_id)
                    continue
                if msg.client_id not in expected:
                    self.events.emit(round_num, "unexpected_update_ignored", client=msg.client_id)
                    continue
                update, telemetry = self._read_update(msg)
                agg.accumulate(update)
                telemetry_by_client[msg.client_id] = telemetry
                expected.discard(msg.client_id)
                self.events.emit(round_num, "update_received", client=msg.client_id, n_k=msg.n_k)
                if self.config.runtime.checkpoint_partial_aggregates:
                    self._checkpoint_partial(agg, round_num)
            elif isinstance(msg, Leave):
                if msg.node_manager_id in state.roster:
                    nm = state.remove_manager(msg.node_manager_id)
                    expected -= set(nm.clients)
                    self.events.emit(round_num, "manager_left", manager=nm.id,
                                     clients=sorted(nm.clients))
                manager = self.managers.get(msg.node_manager_id)
                if manager is not None:
                    if manager.failure is not None:
                        raise manager.failure
                    if manager.auto_rejoin:
                        self._pending_joins.append(manager.info.id)
            elif isinstance(msg, Join):
                self._pending_joins.append(msg.node_manager_id)
                self.events.emit(round_num, "manager_join_requested", manager=msg.node_manager_id)
            elif isinstance(msg, Heartbeat):
                self.events.emit(round_num, "heartbeat", id=msg.id)
        for cid in sorted(telemetry_by_client):
            update = next(u for u in agg.updates if u.client_id == cid)
            self._record_client_metrics(update, telemetry_by_client[cid])
        return agg

    def _checkpoint_partial(self, agg: AggregatorState, round_num: int) -> None:
        key = f"ckpt/agg-{round_num}-{len(agg.contributors)}"
        blob = encode_sections(
            {
                "round": round_num,
                "weighted_sum": agg.weighted_sum,
                "total_weight": agg.total_weight,
                "contributors": sorted(agg.contributors),
            }
        )
        put_or_verify(self.store, key, blob)

    def _evaluate(self, params: ParamVector) -> tuple[float, float]:
        ce = evaluate_mean_ce(
            self.eval_model,
            params,
            self.corpus,
            self.split.validation,
            self.config.data.batch_size,
            self.config.data.eval_batches,
        )
        return ce, perplexity(ce)

    def _run_round(self, state: ServerState, round_num: int) -> None:
        self._apply_joins(state, round_num, self._pending_joins)
        self._pending_joins = []
        self._pre_dispatch_faults(state, round_num)
        active = state.active_clients()
        if not active:
            raise AllManagersLostError(f"no node managers left at round {round_num}")
        state.sampler = replace(state.sampler, round=round_num)
        sampled = sample_clients(state.sampler, active)
        blob_key = publish_global(self.store, round_num, state.params, self.manifest)
        plan = self._build_plan(state, round_num, sampled, blob_key)
        self.events.emit(round_num, "round_started", sampled=sampled)
        for cid in sampled:
            self._manager_of(cid).dispatch(encode_message(plan.tasks[cid]), self.intake)
        if self.injector.take("server_crash", round_num, "mid_train"):
            raise ServerCrashed(round_num, "mid_train")

        agg = self._collect(state, round_num, set(sampled))
        if not agg.contributors:
            raise RoundAbortedError(f"round {round_num}: no surviving contributors")

        weights = agg.weights()
        pseudograd = agg.finalize()
        w_prev = state.params
        new_params, new_opt = server_step(state.opt, w_prev, pseudograd, round_num)
        state.params = new_params
        state.opt = new_opt
        state.round = round_num

        ordered = sorted(agg.updates, key=lambda u: u.client_id)
        norms = compute_round_norms(
            w_prev,
            [u.delta for u in ordered],
            [weights[u.client_id] for u in ordered],
            new_opt.momentum,
            [u.client_id for u in ordered],
        )
        val_ce, val_ppl = self._evaluate(new_params)
        self.archive.record(
            MetricsRecord(
                "server_round",
                round=round_num,
                values={
                    "loss": val_ce,
                    "perplexity": val_ppl,
                    "pseudograd_norm": norms.pseudograd_norm,
                    "global_norm": l2_norm(new_params),
                    "avg_client_norm": norms.avg_client_norm,
                    "momentum_norm": norms.momentum_norm,
                    "n_contributors": float(len(agg.contributors)),
                    "weight_sum": float(sum(weights.values())),
                },
            )
        )
        for u in ordered:
            self.archive.record(
                MetricsRecord(
                    "client_round",
                    round=round_num,
                    client_id=u.client_id,
                    values={
                        "loss": u.local_metrics.get("mean_loss", 0.0),
                        "param_norm": norms.per_client_norms[u.client_id],
                        "n_k": float(u.n_k),
                        "weight": weights[u.client_id],
                        "delta_norm": l2_norm(u.delta),
                        "final_loss": u.local_metrics.get("final_loss", 0.0),
                    },
                )
            )
        self.events.emit(
            round_num,
            "aggregate_finalized",
            contributors=sorted(agg.contributors),
            weights={str(c): weights[c] for c in sorted(weights)},
            pseudograd_norm=norms.pseudograd_norm,
        )
        wrote_checkpoint = False
        if round_num % self.config.runtime.checkpoint_every == 0 or (
            round_num == self.config.federation.rounds
        ):
            key = checkpoint_server(
                state, self.store, self.manifest,
                self.config.to_json_dict(), self.config.config_hash(),
            )
            self.events.emit(round_num, "checkpoint_written", key=key)
            wrote_checkpoint = True
        self.archive.flush()
        self.events.emit(round_num, "round_completed", perplexity=val_ppl)
        if wrote_checkpoint and self.injector.take("server_crash", round_num, "post_checkpoint"):
            raise ServerCrashed(round_num, "post_checkpoint")

    def run(self, resume: Optional[RestoredServer] = None) -> RunResult:
        if resume is not None:
            if resume.config_hash != self.config.config_hash():
                raise ResumeMismatchError(
                    "checkpoint was written under a different configuration"
                )
            state = resume.state
        else:
            state = self.fresh_state()
            key = checkpoint_server(
                state, self.store, self.manifest,
                self.config.to_json_dict(), self.config.config_hash(),
            )
            self.events.emit(0, "initial_checkpoint_written", key=key)
        try:
            for round_num in range(state.round + 1, self.config.federation.rounds + 1):
                self._run_round(state, round_num)
        finally:
            for manager in self.managers.values():
                manager.shutdown()
        return RunResult(state.params, self.archive, self.events, state, self.store)


def run_training(
    config: ExperimentConfig,
    store: Optional[BlobStore] = None,
    *,
    archive: Optional[MetricsArchive] = None,
    events: Optional[EventLog] = None,
) -> RunResult:
    """Execute a full federated run from a fresh state."""
    store = store if store is not None else open_store(
        config.runtime.mode, config.runtime.blob_root
    )
    runtime = FederatedRuntime(config, store, archive=archive, events=events)
    return runtime.run()


def resume_training(
    store: BlobStore,
    *,
    archive: Optional[MetricsArchive] = None,
    events: Optional[EventLog] = None,
) -> RunResult:
    """Restore the latest server checkpoint and continue to the configured
    number of rounds. An empty store raises NoCheckpointError (a fresh-start
    signal for callers, not a crash)."""
    restored = restore_server(store)
    if restored is None:
        raise NoCheckpointError("no server checkpoint found in store")
    config = config_from_json_dict(restored.config_dict)
    runtime = FederatedRuntime(config, store, archive=archive, events=events)
    return runtime.run(resume=restored)
