"""Deterministic discrete-event simulator for the server protocols.

One event loop owns all state; identical (config, seed) pairs produce
byte-identical traces and metrics.  Simultaneous events are ordered by
(time, worker_id, kind, insertion order) with kinds ranked in causal order:
sends, then applies and drops, then reads, then worker restarts, then
deadlines.  A worker is strictly sequential: its next step begins when its
last gradient layer has gone out.

Asynchronous runs stagger worker start times by a seeded random phase so that
identical workers do not run in lockstep (real fleets never do).
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from . import builders
from .config import ASYNC, SYNC, ExperimentConfig
from .data import Dataset
from .metrics import MetricsRow
from .models import LayeredParams, Model, eval_gradient, eval_loss, eval_metric, init_params
from .optim import LrSchedule, clip_by_global_norm, lr_at
from .protocol import (
    GradientMessage,
    ProtocolError,
    ShardState,
    SyncCollector,
    TimeoutCollector,
    UpdateRule,
    aggregate_mean,
    assemble_params,
    make_shards,
    shard_slices,
)
from .results import (
    STATUS_DIVERGED,
    STATUS_OK,
    STATUS_TIMEOUT_ABORT,
    RunOutput,
)
from .timing import sample_durations
from .trace import KIND_APPLY, KIND_DROP, KIND_READ, KIND_SEND, SHARD_NONE, EventTrace

# Heap tie-break ranks (after time and worker id), in causal order.
_RANK_SEND = 0
_RANK_APPLY = 1
_RANK_READ = 3
_RANK_COMPLETION = 4
_RANK_START = 5
_RANK_DEADLINE = 6
_DEADLINE_WORKER = 1 << 30  # sorts after real workers: arrivals at the deadline count


class Evaluator:
    """Evaluates train/test metrics on a cadence and detects divergence."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        model: Model,
        train: Dataset,
        test: Dataset,
        shards: list[ShardState],
        shard_map: tuple[int, ...],
        schedule: LrSchedule,
    ):
        self.cfg = cfg
        self.model = model
        self.train = train
        self.test = test
        self.shards = shards
        self.shard_map = shard_map
        self.schedule = schedule
        self.eval_target = "ema" if cfg.ema_alpha > 0 else "raw"
        self.rows: list[MetricsRow] = []
        self.next_eval = 0.0
        self.stale_sum = 0.0
        self.stale_count = 0

    def note_staleness(self, value: float, count: int = 1) -> None:
        self.stale_sum += value * count
        self.stale_count += count

    @property
    def staleness_mean(self) -> float:
        return self.stale_sum / self.stale_count if self.stale_count else 0.0

    def emit(self, epoch: float, time_s: float) -> bool:
        """Append one metrics row; False means the run has diverged."""
        params = assemble_params(self.shards, self.shard_map, ema=self.eval_target == "ema")
        train_loss = eval_loss(self.model, params, self.train)
        test_metric = eval_metric(self.model, params, self.test)
        lr = lr_at(self.schedule, self.shards[0].update_count)
        self.rows.append(
            MetricsRow(epoch, time_s, train_loss, test_metric, lr, self.staleness_mean, self.eval_target)
        )
        return bool(np.isfinite(train_loss) and np.isfinite(test_metric))

    def on_progress(self, epoch: float, time_s: float) -> bool:
        if epoch + 1e-9 < self.next_eval:
            return True
        ok = self.emit(epoch, time_s)
        while self.next_eval <= epoch + 1e-9:
            self.next_eval += self.cfg.eval_every
        return ok

    def finish(self, epoch: float, time_s: float) -> bool:
        if self.rows and epoch <= self.rows[-1].epoch + 1e-12:
            return True
        return self.emit(epoch, time_s)


class _DurationStream:
    """Per-worker duration draws, batched to amortize generator overhead.

    Chunked draws are value-identical to one-at-a-time draws for every kind
    except the two-phase mixture, which therefore uses chunk size 1.
    """

    def __init__(self, model, worker: int, rng: np.random.Generator):
        self.model = model
        self.worker = worker
        self.rng = rng
        self.chunk = 1 if model.kind == "pareto-mixture" else 512
        self.buf: np.ndarray = np.empty(0)
        self.i = 0

    def draw(self) -> float:
        if self.i >= self.buf.size:
            self.buf = sample_durations(self.model, self.worker, self.rng, self.chunk)
            self.i = 0
        v = self.buf[self.i]
        self.i += 1
        return float(v)


class _BatchStream:
    """Per-worker batch-index draws, batched; stream-identical to per-step
    draws of the same generator."""

    def __init__(self, rng: np.random.Generator, n: int, batch: int, chunk: int = 256):
        self.rng = rng
        self.n = n
        self.batch = batch
        self.chunk = chunk
        self.buf: np.ndarray = np.empty((0, batch), dtype=np.int64)
        self.i = 0

    def draw(self) -> np.ndarray:
        if self.i >= self.buf.shape[0]:
            self.buf = self.rng.integers(0, self.n, size=(self.chunk, self.batch))
            self.i = 0
        row = self.buf[self.i]
        self.i += 1
        return row


@dataclass
class _Step:
    """One in-flight worker step (everything known at scheduling time)."""

    worker: int
    tag: int | None
    batch: tuple[np.ndarray, np.ndarray]
    layer_read_times: list[float]
    layer_send_times: list[float]
    shard_read_times: list[float]
    shard_apply_times: list[float]
    completion: float
    versions: list[int] | None = None
    snapshot: list | None = None
    reads_remaining: int = 0
    applies_remaining: int = 0
    msg: GradientMessage | None = None


class _SimBase:
    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.model = builders.build_model(cfg)
        self.train, self.test = builders.build_datasets(cfg)
        self.rule = builders.build_rule(cfg, self.train)
        params0 = init_params(self.model, builders.init_rng(seed), cfg.shards_m)
        self.shard_map = params0.shard_map
        self.shards = make_shards(params0, self.rule)
        self.n_layers = self.model.n_layers
        self.split = builders.build_timing(cfg)
        self.latency = builders.build_latency(cfg)
        self.n_workers = builders.total_workers(cfg)
        self.batches = [
            _BatchStream(builders.batch_rng(seed, w), self.train.n, cfg.batch_b)
            for w in range(self.n_workers)
        ]
        self.latency_rngs = [builders.latency_rng(seed, w) for w in range(self.n_workers)]
        self.durations = [
            _DurationStream(self.latency, w, self.latency_rngs[w])
            for w in range(self.n_workers)
        ]
        # Event times as fractions of the sampled duration (uniform per-layer
        # split), so per-step planning is plain float arithmetic.
        L = self.n_layers
        ff, bf, cf = self.split.forward_frac, self.split.backward_frac, self.split.comm_frac
        self.read_frac = tuple(ff * l / L for l in range(L))
        self.send_frac = tuple(ff + bf * (L - l) / L + cf / L for l in range(L))
        self.shard_first_layer = [s.layer_ids[0] for s in self.shards]
        self.shard_max_send_frac = [
            max(self.send_frac[i] for i in s.layer_ids) for s in self.shards
        ]
        self.completion_frac = max(self.send_frac)
        self.trace = EventTrace()
        self.evaluator = Evaluator(
            cfg, self.model, self.train, self.test, self.shards, self.shard_map, self.rule.schedule
        )
        self.heap: list = []
        self.seq = itertools.count()
        self.now = 0.0
        self.status = STATUS_OK
        self.stopped = False
        self.draining = False
        self.sent = 0
        self.applied = 0
        self.dropped = 0

    def push(self, time: float, worker: int, rank: int, payload) -> None:
        heapq.heappush(self.heap, (time, worker, rank, next(self.seq), payload))

    def plan_step(self, worker: int, start: float, tag: int | None) -> _Step:
        d = self.durations[worker].draw()
        reads = [start + d * f for f in self.read_frac]
        sends = [start + d * f for f in self.send_frac]
        idx = self.batches[worker].draw()
        self.sent += 1
        return _Step(
            worker=worker,
            tag=tag,
            batch=(self.train.inputs[idx], self.train.targets[idx]),
            layer_read_times=reads,
            layer_send_times=sends,
            shard_read_times=[reads[i] for i in self.shard_first_layer],
            shard_apply_times=[start + d * f for f in self.shard_max_send_frac],
            completion=start + d * self.completion_frac,
        )

    def run_loop(self) -> None:
        while self.heap and not self.stopped:
            self.now, worker, rank, _, payload = heapq.heappop(self.heap)
            self.dispatch(worker, rank, payload)

    def dispatch(self, worker: int, rank: int, payload) -> None:
        raise NotImplementedError

    def build_output(self, epochs: float) -> RunOutput:
        self.evaluator.finish(epochs, self.now)
        params = assemble_params(self.shards, self.shard_map)
        summary = {
            "status": self.status,
            "protocol": self.cfg.protocol,
            "backend": "sim",
            "seed": self.seed,
            "epochs": epochs,
            "time_s": self.now,
            "messages_sent": self.sent,
            "gradients_applied": self.applied,
            "gradients_dropped": self.dropped,
            "staleness_mean": self.evaluator.staleness_mean,
            "staleness_count": self.evaluator.stale_count,
            "final_train_loss": self.evaluator.rows[-1].train_loss,
            "final_test_metric": self.evaluator.rows[-1].test_metric,
            "eval_target": self.evaluator.eval_target,
        }
        return RunOutput(self.trace.finalize(), self.evaluator.rows, params, summary)


class _AsyncSim(_SimBase):
    """Every gradient applies on arrival; staleness accrues between a shard's
    read and the arrival of the gradient computed from it."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        super().__init__(cfg, seed)
        self.target_messages = cfg.workers_n * cfg.max_epochs
        self.messages_done = 0

    def run(self) -> RunOutput:
        if not self.evaluator.emit(0.0, 0.0):
            self.status = STATUS_DIVERGED
            return self.build_output(0.0)
        for w in range(self.n_workers):
            phase = self.latency_rngs[w].random()
            warm = self.durations[w].draw()
            self.push(phase * warm, w, _RANK_START, None)
        self.run_loop()
        return self.build_output(self.messages_done / self.cfg.workers_n)

    def dispatch(self, worker: int, rank: int, payload) -> None:
        if rank == _RANK_START:
            self.on_start(worker)
        elif rank == _RANK_READ:
            self.on_read(worker, *payload)
        elif rank == _RANK_SEND:
            self.on_send(worker, *payload)
        elif rank == _RANK_APPLY:
            self.on_apply(worker, *payload)

    def on_start(self, worker: int) -> None:
        if self.draining:
            return
        step = self.plan_step(worker, self.now, tag=None)
        step.versions = [-1] * len(self.shards)
        step.snapshot = [None] * self.n_layers
        step.reads_remaining = len(self.shards)
        step.applies_remaining = len(self.shards)
        for j, t in enumerate(step.shard_read_times):
            self.push(t, worker, _RANK_READ, (j, step))
        for layer in range(self.n_layers):
            self.push(step.layer_send_times[layer], worker, _RANK_SEND, (layer, step))
        for j, t in enumerate(step.shard_apply_times):
            self.push(t, worker, _RANK_APPLY, (j, step))

    def on_read(self, worker: int, shard_id: int, step: _Step) -> None:
        shard = self.shards[shard_id]
        step.versions[shard_id] = shard.update_count
        for i in shard.layer_ids:
            step.snapshot[i] = shard.layers[i].copy()
            self.trace.append(self.now, KIND_READ, worker, shard_id, None, i, shard.update_count)
        step.reads_remaining -= 1
        if step.reads_remaining == 0:
            params = LayeredParams(tuple(step.snapshot), self.shard_map)
            grad = eval_gradient(self.model, params, *step.batch)
            if self.cfg.clip_norm > 0:
                grad = clip_by_global_norm(grad, self.cfg.clip_norm)
            step.msg = GradientMessage(grad, worker, None, tuple(step.versions))
            step.snapshot = None

    def on_send(self, worker: int, layer: int, step: _Step) -> None:
        shard_id = self.shard_map[layer]
        self.trace.append(self.now, KIND_SEND, worker, shard_id, None, layer, step.versions[shard_id])

    def on_apply(self, worker: int, shard_id: int, step: _Step) -> None:
        shard = self.shards[shard_id]
        version = shard.update_count
        self.evaluator.note_staleness(version - step.versions[shard_id])
        self.trace.append(self.now, KIND_APPLY, worker, shard_id, None, None, version)
        shard.apply(shard_slices(step.msg.grad, shard), version, self.rule)
        self.applied += 1
        step.applies_remaining -= 1
        if step.applies_remaining > 0:
            return
        self.messages_done += 1
        epoch = self.messages_done / self.cfg.workers_n
        if not self.evaluator.on_progress(epoch, self.now):
            self.status = STATUS_DIVERGED
            self.stopped = True
            return
        if self.messages_done >= self.target_messages:
            self.draining = True
        if not self.draining:
            self.push(step.completion, worker, _RANK_START, None)


class _SyncSim(_SimBase):
    """Barrier-synchronized aggregation; late and surplus gradients drop.

    Between barriers no state changes, so a step's reads, versions, and batch
    are known at scheduling time and only its completion is a queue event.
    The trace is re-ordered by time when finalized.
    """

    def __init__(self, cfg: ExperimentConfig, seed: int, on_iteration=None):
        super().__init__(cfg, seed)
        self.on_iteration = on_iteration
        self.timeout_mode = cfg.sync_policy == "timeout"
        if self.timeout_mode:
            self.collector: TimeoutCollector | SyncCollector = TimeoutCollector(
                self.n_workers,
                cfg.timeout.deadline,
                cfg.timeout.n_min,
                cfg.timeout.max_retries,
            )
        else:
            self.collector = SyncCollector(cfg.workers_n, cfg.backups_b)
        self.current_params: LayeredParams | None = None
        self.busy = [False] * self.n_workers

    def run(self) -> RunOutput:
        if not self.evaluator.emit(0.0, 0.0):
            self.status = STATUS_DIVERGED
            return self.build_output(0.0)
        self.open_iteration(0.0)
        self.run_loop()
        return self.build_output(float(self.collector.current_iter))

    def dispatch(self, worker: int, rank: int, payload) -> None:
        if rank == _RANK_COMPLETION:
            self.on_completion(worker, payload)
        elif rank == _RANK_DEADLINE:
            self.on_deadline(payload)

    def open_iteration(self, when: float) -> None:
        self.current_params = assemble_params(self.shards, self.shard_map)
        for w in range(self.n_workers):
            if not self.busy[w]:
                self.start_worker(w, when)
        if self.timeout_mode:
            self.push(self.collector.deadline_at, _DEADLINE_WORKER, _RANK_DEADLINE, self.collector.current_iter)

    def start_worker(self, worker: int, when: float) -> None:
        if self.draining:
            return
        tag = self.collector.current_iter
        step = self.plan_step(worker, when, tag)
        grad = eval_gradient(self.model, self.current_params, *step.batch)
        step.msg = GradientMessage(
            grad,
            worker,
            tag,
            (tag,) * len(self.shards),
            tuple(step.shard_read_times[self.shard_map[i]] for i in range(self.n_layers)),
            tuple(step.layer_send_times),
        )
        append = self.trace.append
        for shard in self.shards:
            t_read = step.shard_read_times[shard.shard_id]
            for i in shard.layer_ids:
                append(t_read, KIND_READ, worker, shard.shard_id, tag, i, tag)
        for layer in range(self.n_layers):
            append(
                step.layer_send_times[layer], KIND_SEND, worker, self.shard_map[layer], tag, layer, tag
            )
        self.busy[worker] = True
        self.push(step.completion, worker, _RANK_COMPLETION, step)

    def on_completion(self, worker: int, step: _Step) -> None:
        self.busy[worker] = False
        before_drops = self.collector.dropped_count
        if self.timeout_mode:
            ready = self.collector.offer(step.msg, self.now)
        else:
            ready = self.collector.offer(step.msg)
        if self.collector.dropped_count > before_drops:
            self.dropped += 1
            self.trace.append(
                self.now, KIND_DROP, worker, SHARD_NONE, step.tag, None, self.collector.current_iter
            )
            if not self.draining:
                self.start_worker(worker, self.now)
            return
        if ready:
            self.barrier()
        # otherwise the worker waits for the barrier to hand out new params

    def on_deadline(self, tag: int) -> None:
        if not self.timeout_mode or tag != self.collector.current_iter or self.draining:
            return
        outcome = self.collector.on_deadline()
        if outcome == "ready":
            self.barrier()
        elif outcome == "retry":
            self.push(self.collector.deadline_at, _DEADLINE_WORKER, _RANK_DEADLINE, tag)
        else:
            self.status = STATUS_TIMEOUT_ABORT
            self.stopped = True

    def barrier(self) -> None:
        t = self.collector.current_iter
        open_time = self.now + self.cfg.timing.apply_overhead
        if self.timeout_mode:
            accepted = self.collector.take(open_time)
        else:
            accepted = self.collector.take()
        mean = aggregate_mean(accepted)
        for shard in self.shards:
            shard.apply(shard_slices(mean, shard), t, self.rule)
        for msg in sorted(accepted, key=lambda m: m.worker_id):
            for shard in self.shards:
                self.trace.append(self.now, KIND_APPLY, msg.worker_id, shard.shard_id, t, None, t)
            self.evaluator.note_staleness(0.0, count=len(self.shards))
        self.applied += len(accepted)
        if self.on_iteration is not None:
            self.on_iteration(t, assemble_params(self.shards, self.shard_map))
        if not self.evaluator.on_progress(float(t + 1), self.now):
            self.status = STATUS_DIVERGED
            self.stopped = True
            return
        if t + 1 >= self.cfg.max_epochs:
            self.draining = True
            return
        self.open_iteration(open_time)


def run_sim(cfg: ExperimentConfig, seed: int | None = None, on_iteration=None) -> RunOutput:
    """Simulate one experiment; bit-reproducible for a given (config, seed)."""
    if cfg.backend != "sim":
        raise ValueError("run_sim needs backend = sim")
    actual_seed = cfg.seed if seed is None else seed
    if cfg.protocol == ASYNC:
        return _AsyncSim(cfg, actual_seed).run()
    if cfg.protocol == SYNC:
        return _SyncSim(cfg, actual_seed, on_iteration).run()
    raise ValueError(f"run_sim does not handle protocol {cfg.protocol!r}")
