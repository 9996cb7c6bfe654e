"""Optimizers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """Per-parameter moment buffers plus a step counter.

    ``kind`` is ``"adam"`` or ``"sgd"``. Adam keeps ``m`` and ``v``; SGD keeps
    ``velocity``. Buffers are keyed by parameter name.
    """

    kind: str
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.0
    weight_decay: float = 0.0
    step: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def buffer(self, slot: str, name: str, like: np.ndarray) -> np.ndarray:
        per = self.buffers.setdefault(slot, {})
        if name not in per:
            per[name] = np.zeros_like(like)
        return per[name]


def adam(lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("adam", lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def sgd(lr: float = 0.01, momentum: float = 0.0, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState("sgd", lr, momentum=momentum, weight_decay=weight_decay)


def _checked_grad(name: str, p: Tensor) -> np.ndarray:
    if p.grad is None:
        raise MissingGradientError(f"parameter {name!r} has no gradient buffer")
    return p.grad


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = _checked_grad(name, p)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.buffer("m", name, p.data)
        v = state.buffer("v", name, p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """SGD with heavy-ball momentum; L2 decay is folded into the gradient first."""
    lr = state.lr if lr is None else lr
    state.step += 1
    for name, p in params.items():
        g = _checked_grad(name, p)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.momentum:
            buf = state.buffer("velocity", name, p.data)
            buf *= state.momentum
            buf += g
            g = buf
        p.data = (p.data - lr * g).astype(p.data.dtype, copy=False)


def step(params: Mapping[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    if state.kind == "adam":
        adam_step(params, state, lr)
    elif state.kind == "sgd":
        sgd_step(params, state, lr)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")


# -- schedules -----------------------------------------------------------------

ONE_CYCLE_WARMUP = 0.3
ONE_CYCLE_START_DIV = 25.0
ONE_CYCLE_FINAL_DIV = 1e4


@dataclass(frozen=True)
class LrSchedule:
    """``kind`` is one of ``one-cycle``, ``step-decay``, ``constant``.

    For one-cycle, ``lr`` is the peak rate; otherwise it is the initial rate.
    Step-decay multiplies by ``factor`` every ``period`` epochs.
    """

    kind: str
    lr: float
    total_steps: int
    steps_per_epoch: int = 1
    factor: float = 0.1
    period: int = 20

    def peak_step(self) -> int:
        return max(1, int(ONE_CYCLE_WARMUP * self.total_steps)) if self.total_steps > 1 else 0


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    if schedule.kind == "constant":
        return schedule.lr
    if schedule.kind == "step-decay":
        epoch = step // schedule.steps_per_epoch
        return schedule.lr * schedule.factor ** (epoch // schedule.period)
    if schedule.kind == "one-cycle":
        peak = schedule.lr
        start = peak / ONE_CYCLE_START_DIV
        final = peak / ONE_CYCLE_FINAL_DIV
        top = schedule.peak_step()
        if step < top:
            return _cos_interp(start, peak, step / top)
        tail = schedule.total_steps - 1 - top
        if tail <= 0:
            return peak
        return _cos_interp(peak, final, (step - top) / tail)
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")
