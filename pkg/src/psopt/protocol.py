"""Parameter-server protocol state machines, backend-agnostic.

Four roles: asynchronous worker and server (every gradient is applied on
arrival, possibly computed against a mixture of shard versions), and
synchronous worker and server (gradients are tagged with the iteration they
read; the server aggregates the first N matching gradients and drops the
rest, so extra backup workers absorb stragglers without introducing
staleness).

Backends guarantee exclusivity: each ShardState and collector is driven by a
single execution context; messages are immutable once built.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, sample_batch
from .models import LayeredGradient, LayeredParams, Model, eval_gradient
from .optim import (
    RMSPROP_MOMENTUM,
    SGD,
    LrSchedule,
    clip_by_global_norm,
    lr_at,
)


class ProtocolError(RuntimeError):
    """A message violated the protocol state machine."""


@dataclass(frozen=True)
class GradientMessage:
    """A worker's gradient, tagged with where and when it was read."""

    grad: LayeredGradient
    worker_id: int
    iter_tag: int | None
    read_versions: tuple[int, ...]  # per-shard update counts observed at read
    layer_read_times: tuple[float, ...] = ()
    layer_send_times: tuple[float, ...] = ()


@dataclass(frozen=True)
class ReadSnapshot:
    """Assembled parameters plus the per-shard versions they were read at."""

    params: LayeredParams
    shard_versions: tuple[int, ...]


@dataclass(frozen=True)
class UpdateRule:
    """Everything a server shard needs to turn a gradient into an update."""

    schedule: LrSchedule
    optimizer: str = SGD
    decay: float = 0.9
    momentum: float = 0.9
    epsilon: float = 1e-10
    ema_alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.optimizer not in (SGD, RMSPROP_MOMENTUM):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in [0, 1]")


class ShardState:
    """One server shard: a subset of layers plus optimizer and EMA state.

    update_count increments by exactly one per applied gradient (asynchronous)
    or per aggregated iteration (synchronous).
    """

    __slots__ = ("shard_id", "layer_ids", "layers", "update_count", "ms", "mom", "ema")

    def __init__(self, shard_id: int, layer_ids: tuple[int, ...], layers: dict[int, np.ndarray], rule: UpdateRule):
        self.shard_id = shard_id
        self.layer_ids = layer_ids
        self.layers = layers
        self.update_count = 0
        if rule.optimizer == RMSPROP_MOMENTUM:
            self.ms = {i: np.zeros_like(layers[i]) for i in layer_ids}
            self.mom = {i: np.zeros_like(layers[i]) for i in layer_ids}
        else:
            self.ms = None
            self.mom = None
        if rule.ema_alpha > 0.0:
            self.ema = {i: layers[i].copy() for i in layer_ids}
        else:
            self.ema = None

    def apply(self, grads: dict[int, np.ndarray], t_index: int, rule: UpdateRule) -> None:
        """Apply one (possibly aggregated) gradient with the rate for t_index."""
        lr = lr_at(rule.schedule, t_index)
        for i in self.layer_ids:
            g = grads[i]
            if self.ms is not None:
                ms = rule.decay * self.ms[i] + (1.0 - rule.decay) * g * g
                mom = rule.momentum * self.mom[i] + lr * g / np.sqrt(ms + rule.epsilon)
                self.ms[i] = ms
                self.mom[i] = mom
                self.layers[i] = self.layers[i] - mom
            else:
                self.layers[i] = self.layers[i] - lr * g
        self.update_count += 1
        if self.ema is not None:
            a = rule.ema_alpha
            for i in self.layer_ids:
                self.ema[i] = a * self.ema[i] + (1.0 - a) * self.layers[i]


def make_shards(params: LayeredParams, rule: UpdateRule) -> list[ShardState]:
    shards = []
    for j in range(params.n_shards):
        ids = tuple(i for i, s in enumerate(params.shard_map) if s == j)
        layers = {i: params.layers[i].copy() for i in ids}
        shards.append(ShardState(j, ids, layers, rule))
    return shards


def assemble_params(shards: list[ShardState], shard_map: tuple[int, ...], ema: bool = False) -> LayeredParams:
    layers: list[np.ndarray] = [None] * len(shard_map)  # type: ignore[list-item]
    for shard in shards:
        src = shard.ema if ema else shard.layers
        if src is None:
            raise ValueError("shard has no averaged parameters")
        for i in shard.layer_ids:
            layers[i] = src[i].copy()
    return LayeredParams(tuple(layers), shard_map)


def read_snapshot(shards: list[ShardState], shard_map: tuple[int, ...]) -> ReadSnapshot:
    return ReadSnapshot(
        assemble_params(shards, shard_map),
        tuple(s.update_count for s in shards),
    )


def shard_slices(msg_grad: LayeredGradient, shard: ShardState) -> dict[int, np.ndarray]:
    return {i: msg_grad.layers[i] for i in shard.layer_ids}


def async_worker_step(
    snapshot: ReadSnapshot,
    model: Model,
    data: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    worker_id: int,
    clip_norm: float | None = None,
) -> GradientMessage:
    """One asynchronous worker pass: gradient at whatever was read."""
    x, y = sample_batch(data, batch_size, rng)
    grad = eval_gradient(model, snapshot.params, x, y)
    if clip_norm:
        grad = clip_by_global_norm(grad, clip_norm)
    return GradientMessage(grad, worker_id, None, snapshot.shard_versions)


def async_ps_apply(shard: ShardState, msg: GradientMessage, rule: UpdateRule) -> ShardState:
    """Apply one worker gradient to one shard; never rejects."""
    shard.apply(shard_slices(msg.grad, shard), shard.update_count, rule)
    return shard


def sync_worker_step(
    snapshot: ReadSnapshot,
    t: int,
    model: Model,
    data: Dataset,
    batch_size: int,
    rng: np.random.Generator,
    worker_id: int,
) -> GradientMessage:
    """One synchronous worker pass at iteration t."""
    if any(v != t for v in snapshot.shard_versions):
        raise ProtocolError(
            f"sync read at iteration {t} saw shard versions {snapshot.shard_versions}"
        )
    x, y = sample_batch(data, batch_size, rng)
    grad = eval_gradient(model, snapshot.params, x, y)
    return GradientMessage(grad, worker_id, t, snapshot.shard_versions)


class SyncCollector:
    """Collects gradients for the current iteration; first N win.

    Gradients tagged with an older iteration (stragglers) are dropped, as are
    same-iteration gradients beyond the first N (backup surplus).
    """

    def __init__(self, target_n: int, backup_b: int = 0, start_iter: int = 0):
        if target_n < 1 or backup_b < 0:
            raise ValueError("need target_n >= 1 and backup_b >= 0")
        self.target_n = target_n
        self.backup_b = backup_b
        self.current_iter = start_iter
        self.accepted: list[GradientMessage] = []
        self.dropped_count = 0

    def offer(self, msg: GradientMessage) -> bool:
        """Returns True when the N-th gradient for this iteration arrives."""
        if msg.iter_tag is None or msg.iter_tag > self.current_iter:
            raise ProtocolError(
                f"gradient tagged {msg.iter_tag} at iteration {self.current_iter}"
            )
        if msg.iter_tag < self.current_iter or len(self.accepted) >= self.target_n:
            self.dropped_count += 1
            return False
        self.accepted.append(msg)
        return len(self.accepted) == self.target_n

    def take(self) -> list[GradientMessage]:
        """Hand over the aggregation set and advance to the next iteration."""
        if len(self.accepted) != self.target_n:
            raise ProtocolError(
                f"take() with {len(self.accepted)} of {self.target_n} gradients"
            )
        out = self.accepted
        self.accepted = []
        self.current_iter += 1
        return out


class TimeoutCollector:
    """Deadline-based alternative to backup workers.

    An iteration closes when its deadline passes with at least n_min
    gradients, or as soon as every worker has reported.  An empty deadline
    doubles the window, at most max_retries times.
    """

    def __init__(
        self,
        total_workers: int,
        deadline: float,
        n_min: int = 1,
        max_retries: int = 3,
        start_iter: int = 0,
        start_time: float = 0.0,
    ):
        if total_workers < 1 or n_min < 1 or n_min > total_workers:
            raise ValueError("need 1 <= n_min <= total_workers")
        if deadline <= 0:
            raise ValueError("deadline must be positive")
        self.total_workers = total_workers
        self.base_deadline = deadline
        self.n_min = n_min
        self.max_retries = max_retries
        self.current_iter = start_iter
        self.iter_start = start_time
        self.deadline_at = start_time + deadline
        self.retries = 0
        self.accepted: list[GradientMessage] = []
        self.dropped_count = 0

    def offer(self, msg: GradientMessage, arrival: float) -> bool:
        """Returns True when all workers have reported (early close)."""
        if msg.iter_tag is None or msg.iter_tag > self.current_iter:
            raise ProtocolError(
                f"gradient tagged {msg.iter_tag} at iteration {self.current_iter}"
            )
        if msg.iter_tag < self.current_iter or arrival > self.deadline_at:
            self.dropped_count += 1
            return False
        self.accepted.append(msg)
        return len(self.accepted) == self.total_workers

    def on_deadline(self) -> str:
        """Resolve a deadline: 'ready', 'retry' (window doubled) or 'abort'."""
        if len(self.accepted) >= self.n_min:
            return "ready"
        if self.retries >= self.max_retries:
            return "abort"
        self.retries += 1
        self.deadline_at = self.iter_start + self.base_deadline * 2**self.retries
        return "retry"

    def take(self, now: float) -> list[GradientMessage]:
        if not self.accepted:
            raise ProtocolError("take() on an empty timeout collector")
        out = self.accepted
        self.accepted = []
        self.current_iter += 1
        self.retries = 0
        self.iter_start = now
        self.deadline_at = now + self.base_deadline
        return out


def aggregate_mean(accepted: list[GradientMessage]) -> LayeredGradient:
    """Mean of the accepted gradients, summed in worker-id order.

    The fixed summation order makes the result independent of arrival order.
    """
    msgs = sorted(accepted, key=lambda m: m.worker_id)
    n = len(msgs)
    layers = []
    for li in range(msgs[0].grad.n_layers):
        total = msgs[0].grad.layers[li].copy()
        for m in msgs[1:]:
            total += m.grad.layers[li]
        layers.append(total / n)
    batch = sum(m.grad.batch_size for m in msgs)
    return LayeredGradient(tuple(layers), batch)


def sync_ps_apply(
    shards: list[ShardState],
    accepted: list[GradientMessage],
    rule: UpdateRule,
    expect_n: int | None = None,
) -> list[ShardState]:
    """Apply the mean of the accepted gradients once, to every shard.

    All shard update counts advance together; the learning-rate index is the
    shared iteration number.
    """
    if expect_n is not None and len(accepted) != expect_n:
        raise ProtocolError(f"aggregating {len(accepted)} gradients, want {expect_n}")
    mean = aggregate_mean(accepted)
    t = shards[0].update_count
    if any(s.update_count != t for s in shards):
        raise ProtocolError("sync shards have diverging update counts")
    for shard in shards:
        shard.apply(shard_slices(mean, shard), t, rule)
    return shards


def with_times(
    msg: GradientMessage,
    read_times: tuple[float, ...],
    send_times: tuple[float, ...],
) -> GradientMessage:
    return replace(msg, layer_read_times=read_times, layer_send_times=send_times)
