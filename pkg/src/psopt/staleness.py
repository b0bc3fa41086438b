"""Controlled staleness injection for serial training, and staleness
measurement over traces.

Injection replays distributed staleness in a single loop: the gradient for
step t is computed at the parameters from step t - s, with s drawn from a
configurable distribution whose mean ramps up over the first few epochs
(mirroring a worker fleet growing to full size).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import builders, rng as rngmod
from .config import SERIAL_STALE, ExperimentConfig
from .metrics import MetricsRow
from .models import LayeredParams, Model, eval_gradient, init_params
from .protocol import ShardState, UpdateRule, make_shards, shard_slices
from .results import STATUS_DIVERGED, STATUS_OK, RunOutput
from .simulate import Evaluator
from .trace import (
    KIND_APPLY,
    KIND_READ,
    KIND_SEND,
    EventTrace,
    match_messages,
)

FIXED = "fixed"
UNIFORM_INTEGER = "uniform-integer"


@dataclass(frozen=True)
class StalenessSchedule:
    """Target mean staleness, reached linearly over the first ramp_epochs."""

    target_mean: float
    ramp_epochs: float = 3.0
    distribution: str = UNIFORM_INTEGER

    def __post_init__(self) -> None:
        if self.target_mean < 0:
            raise ValueError("target_mean must be >= 0")
        if self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be >= 0")
        if self.distribution not in (FIXED, UNIFORM_INTEGER):
            raise ValueError("distribution must be fixed or uniform-integer")

    def history_depth(self) -> int:
        if self.distribution == UNIFORM_INTEGER:
            return int(round(2 * self.target_mean)) + 1
        return int(round(self.target_mean)) + 1


def ramp_target(schedule: StalenessSchedule, epoch: float) -> float:
    """Effective mean staleness at a (possibly fractional) epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.ramp_epochs == 0:
        return schedule.target_mean
    return schedule.target_mean * min(1.0, epoch / schedule.ramp_epochs)


def draw_staleness(
    schedule: StalenessSchedule, epoch: float, rng: np.random.Generator
) -> int:
    """Sample the staleness for one step; mean approximates the ramped target."""
    eff = ramp_target(schedule, epoch)
    if schedule.distribution == FIXED:
        return int(round(eff))
    hi = int(round(2 * eff))
    return int(rng.integers(0, hi + 1))


class ParamHistory:
    """Ring buffer of the last `depth` parameter snapshots, keyed by step."""

    def __init__(self, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self._buf: deque[tuple[int, tuple[np.ndarray, ...]]] = deque(maxlen=depth)

    def push(self, step: int, layers: tuple[np.ndarray, ...]) -> None:
        self._buf.append((step, tuple(v.copy() for v in layers)))

    @property
    def oldest_step(self) -> int:
        return self._buf[0][0]

    def get(self, step: int) -> tuple[int, tuple[np.ndarray, ...]]:
        """Snapshot at `step`, clamped to the oldest retained one."""
        if not self._buf:
            raise LookupError("empty history")
        first = self.oldest_step
        idx = max(0, step - first)
        got = self._buf[min(idx, len(self._buf) - 1)]
        return got


def stale_step(
    t: int,
    history: ParamHistory,
    schedule: StalenessSchedule,
    model: Model,
    batch: tuple[np.ndarray, np.ndarray],
    shard: ShardState,
    shard_map: tuple[int, ...],
    rule: UpdateRule,
    epoch: float,
    rng: np.random.Generator,
) -> int:
    """Apply one update using a gradient computed at old parameters.

    Returns the realized staleness (requested s clamped to what the history
    still holds).  With a zero target this is exactly a plain serial step.
    """
    want = draw_staleness(schedule, epoch, rng)
    read_step, layers = history.get(t - want)
    realized = t - read_step
    params = LayeredParams(layers, shard_map)
    grad = eval_gradient(model, params, *batch)
    shard.apply(shard_slices(grad, shard), t, rule)
    history.push(t + 1, tuple(shard.layers[i] for i in shard.layer_ids))
    return realized


class _BlockSampler:
    """Batch indices drawn as equal blocks from several worker streams.

    With block count n and batch B, step t consumes B/n draws from each of n
    per-worker streams in worker order.  A synchronous run with n workers and
    per-worker batch B/n consumes exactly the same points in the same order,
    which is what makes trajectory-equivalence checks possible.
    """

    def __init__(self, seed: int, blocks: int, batch: int, n_data: int):
        self.rngs = [builders.batch_rng(seed, w) for w in range(blocks)]
        self.per_block = batch // blocks
        self.n_data = n_data

    def next_indices(self) -> np.ndarray:
        return np.concatenate(
            [g.integers(0, self.n_data, size=self.per_block) for g in self.rngs]
        )


def run_serial(cfg: ExperimentConfig, seed: int | None = None) -> RunOutput:
    """Serial training loop, optionally with injected gradient staleness."""
    actual_seed = cfg.seed if seed is None else seed
    model = builders.build_model(cfg)
    train, test = builders.build_datasets(cfg)
    rule = builders.build_rule(cfg, train)
    params0 = init_params(model, builders.init_rng(actual_seed), 1)
    shard_map = params0.shard_map
    shards = make_shards(params0, rule)
    shard = shards[0]
    evaluator = Evaluator(cfg, model, train, test, shards, shard_map, rule.schedule)
    trace = EventTrace()
    if cfg.protocol == SERIAL_STALE:
        schedule = StalenessSchedule(
            cfg.staleness.target_mean, cfg.staleness.ramp_epochs, cfg.staleness.distribution
        )
    else:
        schedule = StalenessSchedule(0.0, cfg.staleness.ramp_epochs, cfg.staleness.distribution)
    history = ParamHistory(schedule.history_depth())
    history.push(0, tuple(shard.layers[i] for i in shard.layer_ids))
    sampler = _BlockSampler(actual_seed, cfg.sample_block_n, cfg.batch_b, train.n)
    stale_rng = rngmod.substream(actual_seed, rngmod.DOMAIN_STALENESS, 0)
    per_epoch = builders.batches_per_epoch(cfg, train)
    steps = cfg.max_epochs * per_epoch
    status = STATUS_OK
    if not evaluator.emit(0.0, 0.0):
        status = STATUS_DIVERGED
        steps = 0
    t = 0
    for t in range(steps):
        idx = sampler.next_indices()
        batch = (train.inputs[idx], train.targets[idx])
        realized = stale_step(
            t, history, schedule, model, batch, shard, shard_map, rule, t / per_epoch, stale_rng
        )
        evaluator.note_staleness(realized)
        now = float(t)
        for i in shard.layer_ids:
            trace.append(now, KIND_READ, 0, 0, None, i, t - realized)
        for i in shard.layer_ids:
            trace.append(now, KIND_SEND, 0, 0, None, i, t - realized)
        trace.append(now, KIND_APPLY, 0, 0, None, None, t)
        if not evaluator.on_progress((t + 1) / per_epoch, float(t + 1)):
            status = STATUS_DIVERGED
            break
    done = t + 1 if steps else 0
    epochs = done / per_epoch
    evaluator.finish(epochs, float(done))
    params = LayeredParams(tuple(shard.layers[i] for i in shard.layer_ids), shard_map)
    summary = {
        "status": status,
        "protocol": cfg.protocol,
        "backend": "sim",
        "seed": actual_seed,
        "epochs": epochs,
        "time_s": float(done),
        "messages_sent": done,
        "gradients_applied": done,
        "gradients_dropped": 0,
        "staleness_mean": evaluator.staleness_mean,
        "staleness_count": evaluator.stale_count,
        "final_train_loss": evaluator.rows[-1].train_loss,
        "final_test_metric": evaluator.rows[-1].test_metric,
        "eval_target": evaluator.eval_target,
    }
    return RunOutput(trace.finalize(), evaluator.rows, params, summary)


@dataclass(frozen=True)
class StalenessRow:
    layer: int
    min: float
    mean: float
    median: float
    max: float
    std_dev: float
    count: int


@dataclass(frozen=True)
class StalenessStats:
    """Per-layer staleness distribution over the applied gradients."""

    rows: tuple[StalenessRow, ...]
    dropped: int
    unmatched: int

    def row(self, layer: int) -> StalenessRow:
        for r in self.rows:
            if r.layer == layer:
                return r
        raise KeyError(layer)

    def overall_mean(self) -> float:
        total = sum(r.count for r in self.rows)
        if total == 0:
            return 0.0
        return sum(r.mean * r.count for r in self.rows) / total

    def max_value(self) -> float:
        return max((r.max for r in self.rows), default=0.0)

    def to_csv(self) -> str:
        lines = ["layer,min,mean,median,max,std_dev,count"]
        for r in self.rows:
            lines.append(
                f"{r.layer},{r.min!r},{r.mean!r},{r.median!r},{r.max!r},{r.std_dev!r},{r.count}"
            )
        return "\n".join(lines) + "\n"


def measure_staleness(trace: EventTrace) -> StalenessStats:
    """Per-layer staleness (updates applied between a layer's read and its
    gradient's arrival) over every applied gradient in the trace.

    Dropped gradients are excluded; unresolved in-flight messages are counted
    and reported rather than silently skipped.
    """
    records, unmatched = match_messages(trace)
    per_layer: dict[int, list[int]] = {}
    dropped = 0
    for m in records:
        if m.outcome == "drop":
            dropped += 1
            continue
        for layer, (shard, version, _time) in m.reads.items():
            stale = m.apply_versions[shard] - version
            per_layer.setdefault(layer, []).append(stale)
    rows = []
    for layer in sorted(per_layer):
        vals = np.asarray(per_layer[layer], dtype=float)
        rows.append(
            StalenessRow(
                layer=layer,
                min=float(vals.min()),
                mean=float(vals.mean()),
                median=float(np.median(vals)),
                max=float(vals.max()),
                std_dev=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                count=int(len(vals)),
            )
        )
    return StalenessStats(tuple(rows), dropped, len(unmatched))
