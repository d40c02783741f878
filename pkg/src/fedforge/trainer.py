"""The per-client training engine and the centralized baseline runner.

One train_round call executes exactly S optimizer steps from the received
global weights with a freshly reset AdamW. The schedule clock and the data
cursor are both derived from the task's schedule offset, so a round (or a
whole run) can be replayed bit-identically from the round number alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import BatchIterator, DataSplit, TokenizedCorpus, split_corpus, synth_corpus, tokenize_bytes
from .fedopt import ClientUpdate
from .localopt import (
    AdamWConfig,
    AdamWState,
    MicrobatchAccumulator,
    ScheduleConfig,
    adamw_step,
    clip_grad,
    lr_at,
    perplexity,
    reset_optimizer,
)
from .messages import TrainTask
from .metrics import MetricsArchive, MetricsRecord
from .model import LossEvaluator, TinyLMConfig
from .params import ParamError, ParamVector, l2_norm


class RoundFailedError(RuntimeError):
    """Local training aborted (non-finite loss or injected crash)."""

    def __init__(self, client_id: int, message: str):
        super().__init__(f"client {client_id}: {message}")
        self.client_id = client_id


@dataclass(frozen=True)
class StepTelemetry:
    step: int
    loss: float
    grad_norm_raw: float
    grad_norm_applied: float
    lr: float
    param_norm: float


def train_round(
    params: ParamVector,
    batches: BatchIterator,
    evaluator: LossEvaluator,
    adamw_cfg: AdamWConfig,
    sched: ScheduleConfig,
    task: TrainTask,
    *,
    step_hook=None,
) -> tuple[ClientUpdate, list[StepTelemetry]]:
    """Run one client round; returns the weighted-mean-ready update and
    per-step telemetry.

    The optimizer starts freshly reset; the schedule is evaluated at
    schedule_offset + local step; the data cursor is positioned at
    schedule_offset * micro_batches * batch_size samples into the client's
    stream. step_hook(local_step) runs before each step (fault injection).
    """
    if task.local_steps < 1:
        raise ParamError(f"local_steps must be >= 1, got {task.local_steps}")
    opt = AdamWState.fresh(len(params), adamw_cfg)
    batches.seek(task.schedule_offset * task.micro_batches * task.batch_size)
    w = params
    telemetry: list[StepTelemetry] = []
    for s in range(task.local_steps):
        if step_hook is not None:
            step_hook(s)
        global_step = task.schedule_offset + s
        lr = lr_at(sched, global_step)
        acc = MicrobatchAccumulator(len(params))
        losses = []
        for _ in range(task.micro_batches):
            inputs, _targets = batches.next_batch()
            try:
                loss, grad = evaluator.loss_and_grad(w, inputs)
            except ParamError as exc:
                raise RoundFailedError(task.client_id, f"round {task.round}: {exc}") from exc
            losses.append(loss)
            acc.add(grad)
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise RoundFailedError(task.client_id, f"non-finite loss in round {task.round}")
        grad_vec = acc.average()
        clipped, raw_norm = clip_grad(grad_vec, adamw_cfg.clip_norm)
        w, opt, applied_norm = adamw_step(opt, w, clipped, lr)
        telemetry.append(
            StepTelemetry(global_step, mean_loss, raw_norm, applied_norm, lr, l2_norm(w))
        )
    delta = params.as_f64() - w.as_f64()
    update = ClientUpdate(
        client_id=task.client_id,
        round=task.round,
        n_k=batches.shard.n_k,
        delta=delta,
        local_metrics={
            "mean_loss": float(np.mean([t.loss for t in telemetry])),
            "final_loss": telemetry[-1].loss,
            "final_param_norm": telemetry[-1].param_norm,
        },
    )
    return update, telemetry


def evaluate_mean_ce(
    evaluator: LossEvaluator,
    params: ParamVector,
    corpus: TokenizedCorpus,
    indices: np.ndarray,
    batch_size: int,
    max_batches: int,
) -> float:
    """Mean next-token cross-entropy over a fixed prefix of the validation set."""
    if indices.size == 0:
        raise ParamError("validation set is empty")
    n = min(indices.size, batch_size * max_batches)
    total, count = 0.0, 0
    for start in range(0, n, batch_size):
        rows = indices[start : min(start + batch_size, n)]
        batch = corpus.samples(rows)
        total += evaluator.loss(params, batch) * rows.size
        count += rows.size
    return total / count


def build_corpus(config: ExperimentConfig) -> TokenizedCorpus:
    d = config.data
    if d.source == "file":
        with open(d.path, "rb") as fh:
            text = fh.read()
    else:
        structure = "markov" if d.source == "synthetic-markov" else "repeated_phrases"
        text = synth_corpus(d.seed, d.n_bytes, structure)
    return tokenize_bytes(text, d.sequence_len, config.model.vocab_size)


def build_split(config: ExperimentConfig, corpus: TokenizedCorpus) -> DataSplit:
    return split_corpus(
        corpus, config.federation.n_clients, config.data.seed, config.data.validation_fraction
    )


@dataclass
class BaselineResult:
    params: ParamVector
    archive: MetricsArchive
    final_perplexity: float


def run_baseline(
    config: ExperimentConfig,
    *,
    reset_every: int | None = None,
    archive: MetricsArchive | None = None,
) -> BaselineResult:
    """Centralized equivalent: the same local pipeline over the whole training
    set for rounds*local_steps sequential steps, no federation.

    reset_every mirrors the federated per-round optimizer reset when set (the
    degenerate-federation identity); the standard baseline never resets.
    """
    corpus = build_corpus(config)
    split = split_corpus(corpus, 1, config.data.seed, config.data.validation_fraction)
    shard = split.shards[0]
    evaluator = LossEvaluator(config.model)
    params = evaluator.init_params()
    batches = BatchIterator(corpus, shard, config.data.batch_size, config.data.seed)
    opt = AdamWState.fresh(len(params), config.adamw)
    archive = archive if archive is not None else MetricsArchive()
    total_steps = config.federation.rounds * config.federation.local_steps
    steps_per_round = config.federation.local_steps
    final_ppl = math.nan
    for step in range(total_steps):
        if reset_every is not None and step % reset_every == 0:
            opt = reset_optimizer(opt)
        lr = lr_at(config.schedule, step)
        acc = MicrobatchAccumulator(len(params))
        losses = []
        for _ in range(config.data.micro_batches):
            inputs, _ = batches.next_batch()
            loss, grad = evaluator.loss_and_grad(params, inputs)
            losses.append(loss)
            acc.add(grad)
        mean_loss = float(np.mean(losses))
        clipped, raw_norm = clip_grad(acc.average(), config.adamw.clip_norm)
        params, opt, applied_norm = adamw_step(opt, params, clipped, lr)
        archive.record(
            MetricsRecord(
                "client_step",
                round=step // steps_per_round + 1,
                client_id=0,
                step=step,
                values={
                    "loss": mean_loss,
                    "perplexity": perplexity(mean_loss),
                    "lr": lr,
                    "grad_norm_raw": raw_norm,
                    "grad_norm_applied": applied_norm,
                    "param_norm": l2_norm(params),
                },
            )
        )
        if (step + 1) % steps_per_round == 0:
            ce = evaluate_mean_ce(
                evaluator,
                params,
                corpus,
                split.validation,
                config.data.batch_size,
                config.data.eval_batches,
            )
            final_ppl = perplexity(ce)
            archive.record(
                MetricsRecord(
                    "eval",
                    round=(step + 1) // steps_per_round,
                    values={"loss": ce, "perplexity": final_ppl},
                )
            )
            archive.flush()
    if total_steps == 0:
        ce = evaluate_mean_ce(
            evaluator, params, corpus, split.validation,
            config.data.batch_size, config.data.eval_batches,
        )
        final_ppl = perplexity(ce)
    return BaselineResult(params, archive, final_ppl)
