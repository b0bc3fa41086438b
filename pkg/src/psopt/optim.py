"""Update rules, learning-rate schedules, parameter averaging, clipping.

All operations here are pure: they return new values and never mutate their
inputs.  Shard owners hold optimizer state for their own parameter slices.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .models import LayeredGradient, LayeredParams

CONSTANT = "constant"
EXPONENTIAL_DECAY = "exponential-decay"
LINEAR_ANNEAL = "linear-anneal"
_SCHEDULE_KINDS = (CONSTANT, EXPONENTIAL_DECAY, LINEAR_ANNEAL)

SGD = "sgd"
RMSPROP_MOMENTUM = "rmsprop-momentum"
OPTIMIZER_KINDS = (SGD, RMSPROP_MOMENTUM)


@dataclass(frozen=True)
class LrSchedule:
    """Learning rate as a function of the update index t.

    The exponential form is gamma0 * beta^(t * workers_n / (2 * batches_per_epoch)),
    so that runs aggregating workers_n gradients per update decay at the same
    per-datapoint rate as single-worker runs (workers_n = 1).  The linear
    anneal interprets "epoch" as t * workers_n / batches_per_epoch and scales
    the rate to zero between anneal_start and anneal_end.  With scale_with_n,
    gamma0 is first multiplied by workers_n.
    """

    kind: str
    gamma0: float
    beta: float = 0.94
    workers_n: int = 1
    batches_per_epoch: int = 1
    anneal_start: float = 0.0
    anneal_end: float = 0.0
    scale_with_n: bool = False

    def __post_init__(self) -> None:
        if self.kind not in _SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        if self.workers_n < 1 or self.batches_per_epoch < 1:
            raise ValueError("workers_n and batches_per_epoch must be >= 1")
        if self.kind == LINEAR_ANNEAL and self.anneal_end <= self.anneal_start:
            raise ValueError("linear-anneal needs anneal_end > anneal_start")


def lr_at(schedule: LrSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    base = schedule.gamma0 * (schedule.workers_n if schedule.scale_with_n else 1.0)
    if schedule.kind == CONSTANT:
        return base
    if schedule.kind == EXPONENTIAL_DECAY:
        exponent = t * schedule.workers_n / (2.0 * schedule.batches_per_epoch)
        return base * schedule.beta**exponent
    epoch = t * schedule.workers_n / schedule.batches_per_epoch
    if epoch <= schedule.anneal_start:
        return base
    if epoch >= schedule.anneal_end:
        return 0.0
    span = schedule.anneal_end - schedule.anneal_start
    return base * (schedule.anneal_end - epoch) / span


def sgd_step(params: LayeredParams, grad: LayeredGradient, lr: float) -> LayeredParams:
    _check_shapes(params, grad)
    layers = tuple(p - lr * g for p, g in zip(params.layers, grad.layers))
    return LayeredParams(layers, params.shard_map)


@dataclass(frozen=True)
class RmsPropState:
    """Second-moment and momentum accumulators, congruent with the params."""

    ms: tuple[np.ndarray, ...]
    mom: tuple[np.ndarray, ...]
    decay: float = 0.9
    momentum: float = 0.9
    epsilon: float = 1e-10

    @classmethod
    def zeros(
        cls,
        sizes: tuple[int, ...],
        decay: float = 0.9,
        momentum: float = 0.9,
        epsilon: float = 1e-10,
    ) -> "RmsPropState":
        return cls(
            tuple(np.zeros(s) for s in sizes),
            tuple(np.zeros(s) for s in sizes),
            decay,
            momentum,
            epsilon,
        )


def rmsprop_momentum_step(
    params: LayeredParams, grad: LayeredGradient, state: RmsPropState, lr: float
) -> tuple[LayeredParams, RmsPropState]:
    """One step of RMSProp with momentum.

    ms  <- decay * ms + (1 - decay) * g^2
    mom <- momentum * mom + lr * g / sqrt(ms + eps)
    p   <- p - mom
    """
    _check_shapes(params, grad)
    new_p, new_ms, new_mom = [], [], []
    for p, g, ms, mom in zip(params.layers, grad.layers, state.ms, state.mom):
        ms2 = state.decay * ms + (1.0 - state.decay) * g * g
        mom2 = state.momentum * mom + lr * g / np.sqrt(ms2 + state.epsilon)
        new_p.append(p - mom2)
        new_ms.append(ms2)
        new_mom.append(mom2)
    return (
        LayeredParams(tuple(new_p), params.shard_map),
        replace(state, ms=tuple(new_ms), mom=tuple(new_mom)),
    )


@dataclass(frozen=True)
class EmaState:
    """Shadow parameters maintained as alpha * shadow + (1 - alpha) * params."""

    shadow: tuple[np.ndarray, ...]
    alpha: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def ema_update(state: EmaState, params: LayeredParams) -> EmaState:
    if len(state.shadow) != params.n_layers:
        raise ValueError("shadow/params layer mismatch")
    shadow = tuple(
        state.alpha * s + (1.0 - state.alpha) * p
        for s, p in zip(state.shadow, params.layers)
    )
    return EmaState(shadow, state.alpha)


def global_norm(grad: LayeredGradient) -> float:
    return float(np.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grad.layers)))


def clip_by_global_norm(grad: LayeredGradient, max_norm: float) -> LayeredGradient:
    """Scale the whole gradient down so its joint L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grad)
    if norm <= max_norm:
        return grad
    scale = max_norm / norm
    return LayeredGradient(tuple(g * scale for g in grad.layers), grad.batch_size)


def _check_shapes(params: LayeredParams, grad: LayeredGradient) -> None:
    if params.n_layers != grad.n_layers or any(
        p.shape != g.shape for p, g in zip(params.layers, grad.layers)
    ):
        raise ValueError("gradient shape does not match parameters")
