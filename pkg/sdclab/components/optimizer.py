#!/usr/bin/env python3
"""
Optimizer Component

Replicated Adam with global-norm gradient clipping, L2 weight decay folded
into the gradient and a warmup + cosine learning-rate schedule. Updates run
in 32-bit arithmetic; moments always stay f32 while bf16-emulated parameters
are put back on the bf16 grid after each update.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .error_handler import ConfigError, ContractViolation, NumericalFailure
from .tensor import DType, round_bf16, sequential_sum

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optimizer.lr", f"must be > 0, got {self.lr!r}")
        for key in ("beta1", "beta2"):
            value = getattr(self, key)
            if not 0 <= value < 1:
                raise ConfigError(f"optimizer.{key}", f"must lie in [0, 1), got {value!r}")
        if not self.eps > 0:
            raise ConfigError("optimizer.eps", f"must be > 0, got {self.eps!r}")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay", f"must be >= 0, got {self.weight_decay!r}")
        if not self.max_grad_norm > 0:
            raise ConfigError("optimizer.max_grad_norm", f"must be > 0, got {self.max_grad_norm!r}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup over warmup_fraction of total_steps, then cosine decay to min_lr_ratio * peak."""
    total_steps: int
    warmup_fraction: float = 0.02
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("steps", f"must be >= 1, got {self.total_steps!r}")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("optimizer.warmup_fraction", f"must lie in [0, 1), got {self.warmup_fraction!r}")
        if not 0 <= self.min_lr_ratio <= 1:
            raise ConfigError("optimizer.min_lr_ratio", f"must lie in [0, 1], got {self.min_lr_ratio!r}")

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_fraction * self.total_steps))


def lr_at(step: int, peak_lr: float, schedule: LrSchedule) -> float:
    """Learning rate used by optimizer step `step` (0-based)."""
    if step < 0:
        raise ContractViolation("step must be >= 0", step=step)
    warmup = schedule.warmup_steps
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    decay_steps = max(1, schedule.total_steps - warmup)
    progress = min(1.0, (step - warmup) / decay_steps)
    floor = schedule.min_lr_ratio * peak_lr
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros(p.shape, dtype=np.float32) for name, p in params.items()},
            v={name: np.zeros(p.shape, dtype=np.float32) for name, p in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(step=self.step,
                         m={k: a.copy() for k, a in self.m.items()},
                         v={k: a.copy() for k, a in self.v.items()})


@dataclass(frozen=True)
class StepStats:
    grad_norm: float
    clip_coef: float
    lr: float


def global_grad_norm(grads: Params) -> float:
    """L2 norm over every gradient element; float64, names ascending, indices ascending."""
    total = 0.0
    for name in sorted(grads):
        flat = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        total += float(sequential_sum(flat * flat, axis=0))
    return math.sqrt(total)


def param_diff_l2(a: Params, b: Params) -> float:
    """L2 norm of the elementwise difference between two parameter sets."""
    if a.keys() != b.keys():
        raise ContractViolation("parameter sets differ in names")
    total = 0.0
    for name in sorted(a):
        if a[name].shape != b[name].shape:
            raise ContractViolation("parameter shapes differ", name=name)
        diff = (np.asarray(a[name], dtype=np.float64) - np.asarray(b[name], dtype=np.float64)).reshape(-1)
        total += float(sequential_sum(diff * diff, axis=0))
    return math.sqrt(total)


def clip_coefficient(norm: float, max_norm: float) -> float:
    return max_norm / norm if norm > max_norm else 1.0


def clip_gradients(grads: Params, max_norm: float) -> Tuple[Params, float]:
    """Scale gradients to global norm <= max_norm; returns (clipped, pre-clip norm)."""
    norm = global_grad_norm(grads)
    coef = clip_coefficient(norm, max_norm)
    if coef == 1.0:
        return dict(grads), norm
    factor = np.float32(coef)
    return {name: (g * g.dtype.type(factor)) for name, g in grads.items()}, norm


def accumulate_gradients(per_microstep: Sequence[Params]) -> Params:
    """Average gradients over microsteps, summed in microstep order."""
    if not per_microstep:
        raise ContractViolation("no microstep gradients to accumulate")
    count = len(per_microstep)
    out: Params = {}
    for name in per_microstep[0]:
        total = per_microstep[0][name].copy()
        for grads in per_microstep[1:]:
            total = total + grads[name]
        out[name] = total / total.dtype.type(count) if count > 1 else total
    return out


def adam_step(params: Params, grads: Params, state: AdamState, hyper: AdamHyper,
              lr: float, dtype: DType = DType.F32) -> Tuple[Params, AdamState, StepStats]:
    """One clipped, weight-decayed, bias-corrected Adam update; returns new params and state."""
    if params.keys() != grads.keys():
        raise ContractViolation("gradient names do not match parameters")
    if state.step < 0:
        raise ContractViolation("optimizer step counter must be >= 0", step=state.step)

    clipped, norm = clip_gradients(grads, hyper.max_grad_norm)
    if not math.isfinite(norm):
        raise NumericalFailure("non-finite gradient norm", op="adam_step")
    t = state.step + 1
    f32 = np.float32
    b1, b2 = f32(hyper.beta1), f32(hyper.beta2)
    one_minus_b1, one_minus_b2 = f32(1.0 - hyper.beta1), f32(1.0 - hyper.beta2)
    bc1, bc2 = f32(1.0 - hyper.beta1 ** t), f32(1.0 - hyper.beta2 ** t)
    step_lr, eps, decay = f32(lr), f32(hyper.eps), f32(hyper.weight_decay)

    new_params: Params = {}
    new_state = AdamState(step=t)
    for name, p in params.items():
        if p.shape != clipped[name].shape:
            raise ContractViolation("gradient shape does not match parameter", name=name)
        g = clipped[name].astype(np.float32, copy=False)
        if hyper.weight_decay:
            g = g + decay * p
        m = b1 * state.m[name] + one_minus_b1 * g
        v = b2 * state.v[name] + one_minus_b2 * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        updated = p - step_lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(updated)):
            raise NumericalFailure("non-finite parameter update", op="adam_step", param=name)
        new_params[name] = round_bf16(updated) if dtype == DType.BF16EMU else updated
        new_state.m[name] = m
        new_state.v[name] = v

    stats = StepStats(grad_norm=norm, clip_coef=clip_coefficient(norm, hyper.max_grad_norm), lr=lr)
    return new_params, new_state, stats
