"""AdamW with decoupled weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adamw_step(state: AdamWState, params: Sequence[np.ndarray],
               grads: Sequence[np.ndarray]) -> Sequence[np.ndarray]:
    """One in-place AdamW update; returns ``params``.

    Decay multiplies the parameter by ``1 - lr * weight_decay`` before the
    bias-corrected Adam step, independent of the gradient.
    """
    if len(params) != len(grads):
        raise ConfigError(f"{len(params)} parameters but {len(grads)} gradients")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigError(f"parameter {p.shape} / gradient {g.shape} / moment {m.shape} mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay != 0.0:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    total_steps: int = 1


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    if schedule.total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {schedule.total_steps}")
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    cos = math.cos(math.pi * step / schedule.total_steps)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + cos)
