"""Threaded runtime: real workers and shard owners exchanging messages.

The protocol state machines are the ones the simulator drives, but here every
worker and every shard owner runs in its own thread and nondeterminism is
real.  Shard state is confined to its owning thread; all communication is via
queues of immutable messages; the trace sink serializes appends and stamps
them with a monotonic clock, so trace rows are globally time-ordered.

Synchronous runs aggregate in worker-id order, so with no backups and a fixed
sampling schedule the final parameters match the simulator's bit for bit,
regardless of arrival order.
"""
from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import builders
from .config import ASYNC, SYNC, ExperimentConfig
from .metrics import MetricsRow
from .models import (
    LayeredParams,
    eval_gradient,
    eval_loss,
    eval_metric,
    init_params,
)
from .optim import clip_by_global_norm, lr_at
from .protocol import (
    GradientMessage,
    SyncCollector,
    aggregate_mean,
    make_shards,
    shard_slices,
)
from .results import (
    STATUS_DIVERGED,
    STATUS_OK,
    STATUS_WATCHDOG_ABORT,
    RunOutput,
)
from .timing import sample_duration
from .trace import KIND_APPLY, KIND_DROP, KIND_READ, KIND_SEND, SHARD_NONE, EventTrace


class _Sink:
    """Append-only trace collector; timestamps are taken inside the lock so
    rows are appended in nondecreasing time order."""

    def __init__(self) -> None:
        self.trace = EventTrace()
        self.lock = threading.Lock()
        self.t0 = time.monotonic()
        self.last_append = self.t0

    def log_group(self, rows: list[tuple[int, int, int, int | None, int | None, int]]) -> float:
        """Append rows atomically with one shared timestamp."""
        with self.lock:
            now = time.monotonic()
            t = now - self.t0
            for kind, worker, shard, iter_, layer, version in rows:
                self.trace.append(t, kind, worker, shard, iter_, layer, version)
            self.last_append = now
            return t

    def silence(self) -> float:
        return time.monotonic() - self.last_append


class _Counters:
    def __init__(self, target_messages: int, shards_m: int):
        self.lock = threading.Lock()
        self.target = target_messages
        self.shards_m = shards_m
        self.sent = 0
        self.applied_slices = 0
        self.stale_sum = 0.0
        self.stale_count = 0

    def reserve(self) -> bool:
        with self.lock:
            if self.sent >= self.target:
                return False
            self.sent += 1
            return True

    def note_apply(self, staleness: float) -> None:
        with self.lock:
            self.applied_slices += 1
            self.stale_sum += staleness
            self.stale_count += 1

    def messages_done(self) -> float:
        with self.lock:
            return self.applied_slices / self.shards_m

    def staleness_mean(self) -> float:
        with self.lock:
            return self.stale_sum / self.stale_count if self.stale_count else 0.0


class _ShardActor(threading.Thread):
    """Owns one ShardState; applies gradients and serves parameter reads."""

    def __init__(self, shard, rule, sink: _Sink, counters: _Counters):
        super().__init__(daemon=True)
        self.shard = shard
        self.rule = rule
        self.sink = sink
        self.counters = counters
        self.inbox: queue.Queue = queue.Queue()

    def run(self) -> None:
        while True:
            op = self.inbox.get()
            tag = op[0]
            if tag == "stop":
                return
            if tag == "read":
                _, worker, reply = op
                version = self.shard.update_count
                rows = [
                    (KIND_READ, worker, self.shard.shard_id, None, i, version)
                    for i in self.shard.layer_ids
                ]
                self.sink.log_group(rows)
                copies = {i: self.shard.layers[i].copy() for i in self.shard.layer_ids}
                reply.put((version, copies))
            elif tag == "peek":
                _, reply = op
                raw = {i: self.shard.layers[i].copy() for i in self.shard.layer_ids}
                ema = (
                    {i: self.shard.ema[i].copy() for i in self.shard.layer_ids}
                    if self.shard.ema is not None
                    else None
                )
                reply.put((self.shard.update_count, raw, ema))
            elif tag == "apply":
                _, msg = op
                version = self.shard.update_count
                staleness = version - msg.read_versions[self.shard.shard_id]
                self.sink.log_group(
                    [(KIND_APPLY, msg.worker_id, self.shard.shard_id, None, None, version)]
                )
                self.shard.apply(shard_slices(msg.grad, self.shard), version, self.rule)
                self.counters.note_apply(staleness)
            elif tag == "apply_sync":
                _, mean_grad, t_index, worker_ids, reply = op
                rows = [
                    (KIND_APPLY, w, self.shard.shard_id, t_index, None, t_index)
                    for w in worker_ids
                ]
                self.sink.log_group(rows)
                self.shard.apply(shard_slices(mean_grad, self.shard), t_index, self.rule)
                raw = {i: self.shard.layers[i].copy() for i in self.shard.layer_ids}
                ema = (
                    {i: self.shard.ema[i].copy() for i in self.shard.layer_ids}
                    if self.shard.ema is not None
                    else None
                )
                reply.put((self.shard.shard_id, raw, ema))


@dataclass
class _Shared:
    cfg: ExperimentConfig
    model: object
    train: object
    shard_map: tuple[int, ...]
    latency: object
    sink: _Sink
    abort: threading.Event


def _maybe_sleep(shared: _Shared, worker: int, rng) -> None:
    if shared.cfg.runtime.artificial_delay:
        d = sample_duration(shared.latency, worker, rng)
        time.sleep(d * shared.cfg.runtime.delay_scale)


class _AsyncWorker(threading.Thread):
    def __init__(self, worker_id: int, shared: _Shared, actors, counters, seed: int):
        super().__init__(daemon=True)
        self.worker_id = worker_id
        self.shared = shared
        self.actors = actors
        self.counters = counters
        self.batch_rng = builders.batch_rng(seed, worker_id)
        self.latency_rng = builders.latency_rng(seed, worker_id)
        self.reply: queue.Queue = queue.Queue()

    def run(self) -> None:
        cfg = self.shared.cfg
        shard_map = self.shared.shard_map
        train = self.shared.train
        n_layers = len(shard_map)
        while not self.shared.abort.is_set() and self.counters.reserve():
            versions = []
            snapshot: list = [None] * n_layers
            for actor in self.actors:
                actor.inbox.put(("read", self.worker_id, self.reply))
                version, copies = self.reply.get()
                versions.append(version)
                for i, vec in copies.items():
                    snapshot[i] = vec
            params = LayeredParams(tuple(snapshot), shard_map)
            idx = self.batch_rng.integers(0, train.n, size=cfg.batch_b)
            _maybe_sleep(self.shared, self.worker_id, self.latency_rng)
            grad = eval_gradient(self.shared.model, params, train.inputs[idx], train.targets[idx])
            if cfg.clip_norm > 0:
                grad = clip_by_global_norm(grad, cfg.clip_norm)
            msg = GradientMessage(grad, self.worker_id, None, tuple(versions))
            self.shared.sink.log_group(
                [
                    (KIND_SEND, self.worker_id, shard_map[i], None, i, versions[shard_map[i]])
                    for i in range(n_layers)
                ]
            )
            for actor in self.actors:
                actor.inbox.put(("apply", msg))


class _SyncWorker(threading.Thread):
    def __init__(self, worker_id: int, shared: _Shared, coord_inbox, seed: int):
        super().__init__(daemon=True)
        self.worker_id = worker_id
        self.shared = shared
        self.coord_inbox = coord_inbox
        self.batch_rng = builders.batch_rng(seed, worker_id)
        self.latency_rng = builders.latency_rng(seed, worker_id)
        self.reply: queue.Queue = queue.Queue()

    def run(self) -> None:
        cfg = self.shared.cfg
        shard_map = self.shared.shard_map
        train = self.shared.train
        n_layers = len(shard_map)
        last_read = -1
        while not self.shared.abort.is_set():
            # Block until parameters newer than the ones this worker already
            # contributed to are published (the post-barrier read).
            self.coord_inbox.put(("fetch", self.worker_id, last_read, self.reply))
            got = self.reply.get()
            if got == "stop":
                return
            t, params = got
            last_read = t
            idx = self.batch_rng.integers(0, train.n, size=cfg.batch_b)
            _maybe_sleep(self.shared, self.worker_id, self.latency_rng)
            grad = eval_gradient(self.shared.model, params, train.inputs[idx], train.targets[idx])
            msg = GradientMessage(grad, self.worker_id, t, (t,) * (max(shard_map) + 1))
            self.shared.sink.log_group(
                [(KIND_SEND, self.worker_id, shard_map[i], t, i, t) for i in range(n_layers)]
            )
            self.coord_inbox.put(("grad", msg))


def _watchdog(shared: _Shared, done: threading.Event) -> None:
    quiet = shared.cfg.runtime.quiet_period
    while not done.wait(min(0.25, quiet / 4)):
        if shared.sink.silence() > quiet:
            shared.abort.set()
            return


def _metrics_row(cfg, model, train, test, params, schedule, t_index, stale_mean, epoch, time_s):
    target = "ema" if cfg.ema_alpha > 0 else "raw"
    train_loss = eval_loss(model, params, train)
    test_metric = eval_metric(model, params, test)
    row = MetricsRow(
        epoch, time_s, train_loss, test_metric, lr_at(schedule, t_index), stale_mean, target
    )
    return row, bool(np.isfinite(train_loss) and np.isfinite(test_metric))


def run_concurrent(cfg: ExperimentConfig, seed: int | None = None) -> RunOutput:
    """Execute the configured protocol with real threads and wall-clock time."""
    if cfg.protocol not in (ASYNC, SYNC):
        raise ValueError("concurrent backend handles async and sync only")
    actual_seed = cfg.seed if seed is None else seed
    model = builders.build_model(cfg)
    train, test = builders.build_datasets(cfg)
    rule = builders.build_rule(cfg, train)
    params0 = init_params(model, builders.init_rng(actual_seed), cfg.shards_m)
    shard_map = params0.shard_map
    shards = make_shards(params0, rule)
    latency = builders.build_latency(cfg)
    sink = _Sink()
    abort = threading.Event()
    shared = _Shared(cfg, model, train, shard_map, latency, sink, abort)
    n_workers = builders.total_workers(cfg)
    counters = _Counters(cfg.workers_n * cfg.max_epochs, cfg.shards_m)
    actors = [_ShardActor(s, rule, sink, counters) for s in shards]
    for a in actors:
        a.start()
    done = threading.Event()
    watchdog = threading.Thread(target=_watchdog, args=(shared, done), daemon=True)
    watchdog.start()
    try:
        if cfg.protocol == ASYNC:
            out = _run_async(cfg, shared, actors, counters, actual_seed, model, train, test, rule, shards, n_workers)
        else:
            out = _run_sync(cfg, shared, actors, actual_seed, model, train, test, rule, shards, n_workers)
    finally:
        done.set()
        for a in actors:
            a.inbox.put(("stop",))
        for a in actors:
            a.join(timeout=5.0)
    return out


def _peek_params(actors, shard_map, ema: bool):
    reply: queue.Queue = queue.Queue()
    layers: list = [None] * len(shard_map)
    versions = []
    for a in actors:
        a.inbox.put(("peek", reply))
        version, raw, shadow = reply.get()
        versions.append(version)
        src = shadow if (ema and shadow is not None) else raw
        for i, vec in src.items():
            layers[i] = vec
    return LayeredParams(tuple(layers), shard_map), versions


def _run_async(cfg, shared, actors, counters, seed, model, train, test, rule, shards, n_workers):
    use_ema = cfg.ema_alpha > 0
    workers = [_AsyncWorker(w, shared, actors, counters, seed) for w in range(n_workers)]
    rows: list[MetricsRow] = []
    params, _ = _peek_params(actors, shared.shard_map, use_ema)
    row, ok = _metrics_row(cfg, model, train, test, params, rule.schedule, 0, 0.0, 0.0, 0.0)
    rows.append(row)
    status = STATUS_OK if ok else STATUS_DIVERGED
    if ok:
        for w in workers:
            w.start()
        next_eval = cfg.eval_every
        target_epochs = float(cfg.max_epochs)
        while not shared.abort.is_set():
            done_epochs = counters.messages_done() / cfg.workers_n
            if done_epochs + 1e-9 >= next_eval:
                params, versions = _peek_params(actors, shared.shard_map, use_ema)
                wall = time.monotonic() - shared.sink.t0
                row, ok = _metrics_row(
                    cfg, model, train, test, params, rule.schedule, max(versions),
                    counters.staleness_mean(), done_epochs, wall,
                )
                rows.append(row)
                if not ok:
                    status = STATUS_DIVERGED
                    shared.abort.set()
                    break
                while next_eval <= done_epochs + 1e-9:
                    next_eval += cfg.eval_every
            if done_epochs >= target_epochs:
                break
            time.sleep(0.001)
        for w in workers:
            w.join(timeout=max(10.0, cfg.runtime.quiet_period))
        # Drain remaining applies so every sent gradient lands.
        reply: queue.Queue = queue.Queue()
        for a in actors:
            a.inbox.put(("peek", reply))
            reply.get()
    if shared.abort.is_set() and status == STATUS_OK:
        status = STATUS_WATCHDOG_ABORT
    params, versions = _peek_params(actors, shared.shard_map, False)
    epochs = counters.messages_done() / cfg.workers_n
    wall = time.monotonic() - shared.sink.t0
    eval_params, _ = _peek_params(actors, shared.shard_map, use_ema)
    if not rows or rows[-1].epoch < epochs - 1e-12:
        row, _ = _metrics_row(
            cfg, model, train, test, eval_params, rule.schedule, max(versions),
            counters.staleness_mean(), epochs, wall,
        )
        rows.append(row)
    summary = {
        "status": status,
        "protocol": cfg.protocol,
        "backend": "concurrent",
        "seed": seed,
        "epochs": epochs,
        "time_s": wall,
        "messages_sent": counters.sent,
        "gradients_applied": counters.applied_slices,
        "gradients_dropped": 0,
        "staleness_mean": counters.staleness_mean(),
        "staleness_count": counters.stale_count,
        "final_train_loss": rows[-1].train_loss,
        "final_test_metric": rows[-1].test_metric,
        "eval_target": rows[-1].eval_target,
    }
    return RunOutput(shared.sink.trace.finalize(), rows, params, summary)


def _run_sync(cfg, shared, actors, seed, model, train, test, rule, shards, n_workers):
    use_ema = cfg.ema_alpha > 0
    inbox: queue.Queue = queue.Queue()
    workers = [_SyncWorker(w, shared, inbox, seed) for w in range(n_workers)]
    collector = SyncCollector(cfg.workers_n, cfg.backups_b)
    current = LayeredParams(
        tuple(v.copy() for v in _peek_params(actors, shared.shard_map, False)[0].layers),
        shared.shard_map,
    )
    ema_params = current if use_ema else None
    rows: list[MetricsRow] = []
    row, ok = _metrics_row(cfg, model, train, test, current, rule.schedule, 0, 0.0, 0.0, 0.0)
    rows.append(row)
    status = STATUS_OK if ok else STATUS_DIVERGED
    sent = applied = dropped = 0
    stopped = 0
    next_eval = cfg.eval_every
    reply: queue.Queue = queue.Queue()
    parked: list[tuple[int, queue.Queue]] = []

    def serve_fetch(wid: int, wreply: queue.Queue) -> None:
        t = collector.current_iter
        shared.sink.log_group(
            [(KIND_READ, wid, shared.shard_map[i], t, i, t) for i in range(len(shared.shard_map))]
        )
        wreply.put((t, current))

    if ok:
        for w in workers:
            w.start()
        draining = False
        while stopped < n_workers and not shared.abort.is_set():
            try:
                op = inbox.get(timeout=0.1)
            except queue.Empty:
                continue
            if op[0] == "fetch":
                _, wid, last_read, wreply = op
                if draining:
                    wreply.put("stop")
                    stopped += 1
                elif collector.current_iter > last_read:
                    serve_fetch(wid, wreply)
                else:
                    parked.append((wid, wreply))
                continue
            _, msg = op
            sent += 1
            before = collector.dropped_count
            ready = collector.offer(msg)
            if collector.dropped_count > before:
                dropped += 1
                shared.sink.log_group(
                    [(KIND_DROP, msg.worker_id, SHARD_NONE, msg.iter_tag, None, collector.current_iter)]
                )
                continue
            if not ready:
                continue
            t = collector.current_iter
            accepted = collector.take()
            applied += len(accepted)
            mean = aggregate_mean(accepted)
            worker_ids = sorted(m.worker_id for m in accepted)
            raw_layers: list = [None] * len(shared.shard_map)
            ema_layers: list = [None] * len(shared.shard_map)
            for a in actors:
                a.inbox.put(("apply_sync", mean, t, worker_ids, reply))
            for _ in actors:
                _sid, raw, shadow = reply.get()
                for i, vec in raw.items():
                    raw_layers[i] = vec
                if shadow is not None:
                    for i, vec in shadow.items():
                        ema_layers[i] = vec
            current = LayeredParams(tuple(raw_layers), shared.shard_map)
            if use_ema:
                ema_params = LayeredParams(tuple(ema_layers), shared.shard_map)
            epoch = float(t + 1)
            if epoch + 1e-9 >= next_eval:
                eval_params = ema_params if use_ema else current
                wall = time.monotonic() - shared.sink.t0
                row, ok = _metrics_row(
                    cfg, model, train, test, eval_params, rule.schedule, t + 1, 0.0, epoch, wall
                )
                rows.append(row)
                if not ok:
                    status = STATUS_DIVERGED
                    shared.abort.set()
                    break
                while next_eval <= epoch + 1e-9:
                    next_eval += cfg.eval_every
            if t + 1 >= cfg.max_epochs:
                draining = True
            for wid, wreply in parked:
                if draining:
                    wreply.put("stop")
                    stopped += 1
                else:
                    serve_fetch(wid, wreply)
            parked.clear()
        if shared.abort.is_set():
            for w in workers:
                if w.reply.empty():
                    w.reply.put("stop")
        for w in workers:
            w.join(timeout=max(10.0, cfg.runtime.quiet_period))
    if shared.abort.is_set() and status == STATUS_OK:
        status = STATUS_WATCHDOG_ABORT
    epochs = float(collector.current_iter)
    wall = time.monotonic() - shared.sink.t0
    if not rows or rows[-1].epoch < epochs - 1e-12:
        eval_params = ema_params if use_ema else current
        row, _ = _metrics_row(
            cfg, model, train, test, eval_params, rule.schedule, collector.current_iter, 0.0, epochs, wall
        )
        rows.append(row)
    summary = {
        "status": status,
        "protocol": cfg.protocol,
        "backend": "concurrent",
        "seed": seed,
        "epochs": epochs,
        "time_s": wall,
        "messages_sent": sent,
        "gradients_applied": applied,
        "gradients_dropped": dropped,
        "staleness_mean": 0.0,
        "staleness_count": applied * cfg.shards_m,
        "final_train_loss": rows[-1].train_loss,
        "final_test_metric": rows[-1].test_metric,
        "eval_target": rows[-1].eval_target,
    }
    return RunOutput(shared.sink.trace.finalize(), rows, current, summary)
