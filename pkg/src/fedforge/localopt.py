"""Client-side optimization: AdamW with decoupled weight decay, warmup+cosine
learning-rate schedule, global-norm gradient clipping, and micro-batch
gradient accumulation.

All step math runs in float64. The update vector is materialized to float32
before it is applied, so the weight delta a client reports is exactly the sum
of the float32 updates it applied; moment buffers are stored as float32.
Moments and the step counter reset at every federated round boundary; only the
schedule clock survives across rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .params import ParamError, ParamVector, l2_norm, require_finite


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-5
    clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ParamError(f"betas must be in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ParamError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ParamError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm <= 0:
            raise ParamError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class AdamWState:
    """First/second moment buffers plus the step counter since the last reset."""

    m1: ParamVector
    m2: ParamVector
    step_count: int
    config: AdamWConfig

    @classmethod
    def fresh(cls, n: int, config: AdamWConfig) -> "AdamWState":
        return cls(ParamVector.zeros(n), ParamVector.zeros(n), 0, config)


def reset_optimizer(opt: AdamWState) -> AdamWState:
    """Zero the moments and step counter; hyperparameters are preserved."""
    n = len(opt.m1)
    return AdamWState(ParamVector.zeros(n), ParamVector.zeros(n), 0, opt.config)


def adamw_step(
    opt: AdamWState, params: ParamVector, grad: ParamVector, lr: float
) -> tuple[ParamVector, AdamWState, float]:
    """One AdamW step with decoupled weight decay.

    u = lr * (m1_hat / (sqrt(m2_hat) + eps) + weight_decay * params)
    params' = params - u

    Returns (new params, new state, l2 norm of the applied update).
    """
    if len(params) != len(grad) or len(params) != len(opt.m1):
        raise ParamError(
            f"adamw_step length mismatch: params={len(params)}, grad={len(grad)}, "
            f"moments={len(opt.m1)}"
        )
    cfg = opt.config
    g = grad.as_f64()
    p = params.as_f64()
    t = opt.step_count + 1
    m1 = cfg.beta1 * opt.m1.as_f64() + (1 - cfg.beta1) * g
    m2 = cfg.beta2 * opt.m2.as_f64() + (1 - cfg.beta2) * g * g
    m1_hat = m1 / (1 - cfg.beta1**t)
    m2_hat = m2 / (1 - cfg.beta2**t)
    update64 = lr * (m1_hat / (np.sqrt(m2_hat) + cfg.eps) + cfg.weight_decay * p)
    update = update64.astype(np.float32)
    new_params_arr = (p - update.astype(np.float64)).astype(np.float32)
    if not np.isfinite(new_params_arr).all():
        raise ParamError("non-finite parameters after AdamW step")
    new_state = AdamWState(
        ParamVector(m1.astype(np.float32), check=False),
        ParamVector(m2.astype(np.float32), check=False),
        t,
        cfg,
    )
    applied_norm = l2_norm(update.astype(np.float64))
    return ParamVector(new_params_arr, check=False), new_state, applied_norm


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear warmup into cosine decay, ending at alpha_f * base_lr."""

    base_lr: float
    warmup_steps: int = 100
    t_max: int = 10_000
    alpha_f: float = 1e-6

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ParamError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_steps < self.t_max:
            raise ParamError(
                f"need 0 <= warmup_steps < t_max, got {self.warmup_steps}, {self.t_max}"
            )
        if not 0 <= self.alpha_f <= 1:
            raise ParamError(f"alpha_f must be in [0, 1], got {self.alpha_f}")


def lr_at(sched: ScheduleConfig, global_step: int) -> float:
    """Learning rate at a (non-resetting) global step counter."""
    if global_step < 0:
        raise ParamError(f"global_step must be >= 0, got {global_step}")
    if global_step < sched.warmup_steps:
        return sched.base_lr * (global_step + 1) / sched.warmup_steps
    if global_step >= sched.t_max:
        return sched.base_lr * sched.alpha_f
    progress = (global_step - sched.warmup_steps) / (sched.t_max - sched.warmup_steps)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return sched.base_lr * (sched.alpha_f + (1.0 - sched.alpha_f) * cosine)


def clip_grad(grad: ParamVector, max_norm: float) -> tuple[ParamVector, float]:
    """Scale grad down to max_norm if its l2 norm exceeds it.

    Returns (possibly scaled grad, pre-clip norm).
    """
    if max_norm <= 0:
        raise ParamError(f"max_norm must be positive, got {max_norm}")
    raw = l2_norm(grad)
    if raw <= max_norm:
        return grad, raw
    scaled = (grad.as_f64() * (max_norm / raw)).astype(np.float32)
    return ParamVector(scaled, check=False), raw


class MicrobatchAccumulator:
    """Sums per-micro-batch gradients; average() divides by the count."""

    def __init__(self, n: int):
        if n <= 0:
            raise ParamError(f"gradient length must be positive, got {n}")
        self._sum = np.zeros(n, dtype=np.float64)
        self.count = 0

    def add(self, grad: ParamVector | np.ndarray) -> "MicrobatchAccumulator":
        arr = grad.data if isinstance(grad, ParamVector) else np.asarray(grad)
        if arr.size != self._sum.size:
            raise ParamError(
                f"micro-batch gradient length {arr.size} != accumulator {self._sum.size}"
            )
        require_finite(arr, "micro-batch gradient")
        self._sum += arr.astype(np.float64, copy=False)
        self.count += 1
        return self

    def average(self) -> ParamVector:
        if self.count == 0:
            raise ParamError("average of zero micro-batches")
        return ParamVector((self._sum / self.count).astype(np.float32), check=False)


def perplexity(mean_ce: float) -> float:
    """exp of a mean cross-entropy."""
    if not math.isfinite(mean_ce):
        raise ParamError(f"mean cross-entropy must be finite, got {mean_ce}")
    return math.exp(mean_ce)
