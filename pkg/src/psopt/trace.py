"""Event traces: a totally ordered log of protocol events.

Rows are (time, kind, worker, shard, iter, layer, version) with kind one of
read/send/apply/drop.  Serialized as JSONL, one event per line:

  {"time": 1.5, "kind": "read", "worker": 0, "shard": 0, "iter": null,
   "layer": 0, "version": 7}

Conventions:
  - read: version is the owning shard's update count observed at read time;
    one row per layer (co-sharded layers share one atomic read).
  - send: one row per layer at the moment its gradient goes out; version
    echoes that layer's read version.
  - apply: one row per (gradient, shard); version is the shard's update count
    immediately before this gradient lands.  Synchronous aggregation emits one
    apply row per accepted gradient.
  - drop: one row per rejected gradient, shard = -1 (the rejection is
    message-level); version is the server's iteration at rejection time.
  - iter is the synchronous iteration tag, null for asynchronous events.

Ties in time are stored in causal order: send, then apply/drop, then the reads
of the next step.
"""
from __future__ import annotations

import json
from array import array
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

KIND_READ = 0
KIND_SEND = 1
KIND_APPLY = 2
KIND_DROP = 3
KIND_NAMES = ("read", "send", "apply", "drop")
_KIND_CODE = {name: code for code, name in enumerate(KIND_NAMES)}

SHARD_NONE = -1  # shard field on message-level drop rows


class TraceEvent(NamedTuple):
    time: float
    kind: str
    worker: int
    shard: int
    iter: int | None
    layer: int | None
    version: int


class EventTrace:
    """Append-only columnar event log; finalize() orders rows by time.

    Appends may arrive out of global time order (backends buffer rows);
    finalize sorts stably by time so that equal-time rows keep append order.
    """

    def __init__(self) -> None:
        self._times = array("d")
        self._kinds = array("b")
        self._workers = array("q")
        self._shards = array("q")
        self._iters = array("q")
        self._layers = array("q")
        self._versions = array("q")
        self._final: tuple[np.ndarray, ...] | None = None
        # Bound appends: this path runs a few times per simulated event.
        self._cols = (
            self._times.append,
            self._kinds.append,
            self._workers.append,
            self._shards.append,
            self._iters.append,
            self._layers.append,
            self._versions.append,
        )

    def append(
        self,
        time: float,
        kind: int,
        worker: int,
        shard: int,
        iter_: int | None,
        layer: int | None,
        version: int,
    ) -> None:
        if self._final is not None:
            raise RuntimeError("trace already finalized")
        t, k, w, s, it, ly, v = self._cols
        t(time)
        k(kind)
        w(worker)
        s(shard)
        it(-1 if iter_ is None else iter_)
        ly(-1 if layer is None else layer)
        v(version)

    def __len__(self) -> int:
        return len(self._times)

    def finalize(self) -> "EventTrace":
        if self._final is None:
            times = np.asarray(self._times, dtype=float)
            order = np.argsort(times, kind="stable")
            cols = (
                times,
                np.asarray(self._kinds, dtype=np.int8),
                np.asarray(self._workers, dtype=np.int64),
                np.asarray(self._shards, dtype=np.int64),
                np.asarray(self._iters, dtype=np.int64),
                np.asarray(self._layers, dtype=np.int64),
                np.asarray(self._versions, dtype=np.int64),
            )
            self._final = tuple(c[order] for c in cols)
        return self

    def _columns(self) -> tuple[np.ndarray, ...]:
        if self._final is None:
            raise RuntimeError("call finalize() first")
        return self._final

    @property
    def times(self) -> np.ndarray:
        return self._columns()[0]

    @property
    def kinds(self) -> np.ndarray:
        return self._columns()[1]

    @property
    def workers(self) -> np.ndarray:
        return self._columns()[2]

    @property
    def shards(self) -> np.ndarray:
        return self._columns()[3]

    @property
    def iters(self) -> np.ndarray:
        return self._columns()[4]

    @property
    def layers(self) -> np.ndarray:
        return self._columns()[5]

    @property
    def versions(self) -> np.ndarray:
        return self._columns()[6]

    def __iter__(self) -> Iterator[TraceEvent]:
        times, kinds, workers, shards, iters, layers, versions = self._columns()
        for i in range(len(times)):
            yield TraceEvent(
                float(times[i]),
                KIND_NAMES[kinds[i]],
                int(workers[i]),
                int(shards[i]),
                None if iters[i] < 0 else int(iters[i]),
                None if layers[i] < 0 else int(layers[i]),
                int(versions[i]),
            )

    def to_jsonl(self, path: str) -> None:
        times, kinds, workers, shards, iters, layers, versions = self._columns()
        with open(path, "w") as fh:
            for i in range(len(times)):
                it = "null" if iters[i] < 0 else str(int(iters[i]))
                ly = "null" if layers[i] < 0 else str(int(layers[i]))
                fh.write(
                    f'{{"time": {float(times[i])!r}, "kind": "{KIND_NAMES[kinds[i]]}",'
                    f' "worker": {int(workers[i])}, "shard": {int(shards[i])},'
                    f' "iter": {it}, "layer": {ly}, "version": {int(versions[i])}}}\n'
                )

    @classmethod
    def from_jsonl(cls, path: str) -> "EventTrace":
        trace = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                trace.append(
                    float(rec["time"]),
                    _KIND_CODE[rec["kind"]],
                    int(rec["worker"]),
                    int(rec["shard"]),
                    rec["iter"],
                    rec["layer"],
                    int(rec["version"]),
                )
        return trace.finalize()


@dataclass
class MessageRecord:
    """One gradient's life: reads, sends, and its apply-or-drop outcome."""

    worker: int
    tag: int | None
    reads: dict[int, tuple[int, int, float]] = field(default_factory=dict)
    # layer -> (shard, version, time)
    send_times: dict[int, float] = field(default_factory=dict)
    apply_versions: dict[int, int] = field(default_factory=dict)
    apply_times: dict[int, float] = field(default_factory=dict)
    outcome: str | None = None
    outcome_time: float = float("nan")

    def read_shards(self) -> set[int]:
        return {shard for shard, _, _ in self.reads.values()}

    def resolved(self) -> bool:
        if self.outcome == "drop":
            return True
        return bool(self.reads) and self.read_shards() == set(self.apply_versions)


def match_messages(trace: EventTrace) -> tuple[list[MessageRecord], list[MessageRecord]]:
    """Group trace rows into per-gradient records.

    Returns (resolved, unmatched).  Relies on per-worker causal row order:
    a message's reads precede its sends, which precede its apply/drop rows;
    rows of different messages from the same worker may otherwise interleave.
    """
    trace.finalize()
    open_msgs: dict[int, list[MessageRecord]] = {}
    resolved: list[MessageRecord] = []
    times, kinds, workers, shards, iters, layers, versions = (
        trace.times,
        trace.kinds,
        trace.workers,
        trace.shards,
        trace.iters,
        trace.layers,
        trace.versions,
    )
    for i in range(len(times)):
        kind = kinds[i]
        w = int(workers[i])
        t = float(times[i])
        tag = None if iters[i] < 0 else int(iters[i])
        msgs = open_msgs.setdefault(w, [])
        if kind == KIND_READ:
            layer = int(layers[i])
            if not msgs or msgs[-1].send_times or layer in msgs[-1].reads:
                msgs.append(MessageRecord(worker=w, tag=tag))
            msgs[-1].reads[layer] = (int(shards[i]), int(versions[i]), t)
        elif kind == KIND_SEND:
            layer = int(layers[i])
            for m in reversed(msgs):
                if layer in m.reads and layer not in m.send_times:
                    m.send_times[layer] = t
                    break
        elif kind == KIND_APPLY:
            shard = int(shards[i])
            for m in msgs:
                if m.outcome == "drop" or shard in m.apply_versions:
                    continue
                if tag is not None and m.tag != tag:
                    continue
                if shard not in m.read_shards():
                    continue
                m.apply_versions[shard] = int(versions[i])
                m.apply_times[shard] = t
                m.outcome = "apply"
                m.outcome_time = max(m.apply_times.values())
                if m.resolved():
                    msgs.remove(m)
                    resolved.append(m)
                break
        else:  # drop
            for m in msgs:
                if m.outcome is None and (tag is None or m.tag == tag):
                    m.outcome = "drop"
                    m.outcome_time = t
                    msgs.remove(m)
                    resolved.append(m)
                    break
    unmatched = [m for msgs in open_msgs.values() for m in msgs]
    return resolved, unmatched


def validate_trace(
    trace: EventTrace,
    protocol: str,
    workers_n: int,
    shards_m: int = 1,
) -> list[str]:
    """Check protocol invariants on a finalized trace; returns violations.

    protocol: "sync" (fixed-N aggregation), "timeout" (deadline aggregation)
    or "async".
    """
    trace.finalize()
    problems: list[str] = []
    times = trace.times
    if len(times) and np.any(np.diff(times) < 0):
        problems.append("event times decrease")

    records, unmatched = match_messages(trace)
    if unmatched:
        problems.append(f"{len(unmatched)} unmatched in-flight messages")

    applied = [m for m in records if m.outcome == "apply"]
    dropped = [m for m in records if m.outcome == "drop"]
    for m in records:
        if len(m.send_times) != len(m.reads):
            problems.append(f"worker {m.worker}: sends do not cover reads")
            continue
        if m.send_times and min(m.send_times.values()) < max(t for _, _, t in m.reads.values()):
            problems.append(f"worker {m.worker}: send precedes a read")
        if m.outcome == "apply":
            for shard, at in m.apply_times.items():
                shard_sends = [
                    t for layer, t in m.send_times.items() if m.reads[layer][0] == shard
                ]
                if shard_sends and at < max(shard_sends) - 1e-12:
                    problems.append(
                        f"worker {m.worker}: apply on shard {shard} precedes its send"
                    )

    # Per-shard apply rows must be totally ordered by version.
    apply_mask = trace.kinds == KIND_APPLY
    for shard in np.unique(trace.shards[apply_mask]):
        vs = trace.versions[apply_mask & (trace.shards == shard)]
        if np.any(np.diff(vs) < 0):
            problems.append(f"shard {shard}: apply versions not nondecreasing")
        if protocol == "async" and not np.array_equal(vs, np.arange(len(vs))):
            problems.append(f"shard {shard}: async apply versions not sequential")

    if protocol == "async":
        if dropped:
            problems.append(f"async trace contains {len(dropped)} drops")
    else:
        by_tag: dict[int, int] = {}
        for m in applied:
            if m.tag is None:
                problems.append(f"worker {m.worker}: applied sync gradient without tag")
                continue
            by_tag[m.tag] = by_tag.get(m.tag, 0) + 1
            for layer, (shard, version, _) in m.reads.items():
                if version != m.tag:
                    problems.append(
                        f"worker {m.worker} iter {m.tag}: read version {version} != tag"
                    )
                    break
            for shard, version in m.apply_versions.items():
                if version != m.tag:
                    problems.append(
                        f"worker {m.worker} iter {m.tag}: apply version {version} != tag"
                    )
                    break
            if set(m.apply_versions) != m.read_shards():
                problems.append(f"worker {m.worker} iter {m.tag}: partial shard apply")
        if protocol == "sync":
            for tag, count in sorted(by_tag.items()):
                if count != workers_n:
                    problems.append(f"iter {tag}: aggregated {count} gradients, want {workers_n}")
    return problems
