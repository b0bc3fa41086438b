"""Straggler analysis: k-th arrival statistics, convergence-vs-N curves, and
the best worker/backup split for a fixed machine budget.

An iteration's k-th arrival time is the k-th order statistic of the workers'
step durations; waiting for more gradients improves the update (fewer
iterations to converge) but the last few arrivals are disproportionately
slow, so a small number of backups usually wins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .timing import LatencyModel, sample_durations
from .trace import KIND_READ, KIND_SEND, EventTrace, match_messages


@dataclass(frozen=True)
class ArrivalStats:
    """Per-k distributions of time-to-k-th-gradient across iterations."""

    ks: tuple[int, ...]
    times: dict[int, np.ndarray]

    def mean(self, k: int) -> float:
        return float(self.times[k].mean())

    def median(self, k: int) -> float:
        return float(np.median(self.times[k]))

    def percentile(self, k: int, q: float) -> float:
        return float(np.percentile(self.times[k], q))

    def table_rows(self) -> list[tuple[int, float, float, float, float]]:
        return [
            (k, self.mean(k), self.median(k), self.percentile(k, 10), self.percentile(k, 90))
            for k in self.ks
        ]

    def to_csv(self) -> str:
        lines = ["k,mean,median,p10,p90"]
        for k, mean, median, p10, p90 in self.table_rows():
            lines.append(f"{k},{mean!r},{median!r},{p10!r},{p90!r}")
        return "\n".join(lines) + "\n"


def kth_arrival_stats(trace: EventTrace, ks: list[int]) -> ArrivalStats:
    """Arrival-order statistics from a synchronous trace.

    For each iteration tag, an arrival is a gradient's last send time minus
    the iteration start (its earliest read).  Iterations that never saw k
    tagged gradients are skipped for that k.
    """
    trace.finalize()
    n_workers = int(trace.workers.max()) + 1 if len(trace.workers) else 0
    for k in ks:
        if k < 1 or k > n_workers:
            raise ValueError(f"k = {k} outside 1..{n_workers}")
    tagged = trace.iters >= 0
    read_mask = (trace.kinds == KIND_READ) & tagged
    send_mask = (trace.kinds == KIND_SEND) & tagged
    if not read_mask.any() or not send_mask.any():
        raise ValueError("not a synchronous trace (no tagged reads/sends)")
    n_iters = int(trace.iters[tagged].max()) + 1
    starts = np.full(n_iters, np.inf)
    np.minimum.at(starts, trace.iters[read_mask], trace.times[read_mask])
    # Last send per (iteration, worker) = that gradient's arrival.
    key = trace.iters[send_mask] * n_workers + trace.workers[send_mask]
    arrivals = np.full(n_iters * n_workers, -np.inf)
    np.maximum.at(arrivals, key, trace.times[send_mask])
    arrivals = arrivals.reshape(n_iters, n_workers)
    per_k: dict[int, list[float]] = {k: [] for k in ks}
    for it in range(n_iters):
        row = arrivals[it]
        row = np.sort(row[np.isfinite(row)])
        if row.size == 0 or not np.isfinite(starts[it]):
            continue
        for k in ks:
            if k <= row.size:
                per_k[k].append(row[k - 1] - starts[it])
    out = {k: np.asarray(v) for k, v in per_k.items()}
    for k, v in out.items():
        if v.size == 0:
            raise ValueError(f"no iteration collected {k} gradients")
    return ArrivalStats(tuple(ks), out)


def arrival_cdf(stats: ArrivalStats, k: int) -> np.ndarray:
    """Empirical CDF points for the k-th arrival: rows of (time, cum_prob)."""
    times = np.sort(stats.times[k])
    probs = np.arange(1, times.size + 1) / times.size
    return np.column_stack([times, probs])


@dataclass(frozen=True)
class IterationsCurve:
    """Iterations-to-converge as a function of the aggregation count N."""

    ns: tuple[int, ...]
    iterations: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.ns) < 2:
            raise ValueError("need at least two (N, iterations) samples")
        if len(self.ns) != len(self.iterations):
            raise ValueError("ns and iterations must align")
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ValueError("N values must be strictly increasing")

    @property
    def min_n(self) -> int:
        return self.ns[0]

    @property
    def max_n(self) -> int:
        return self.ns[-1]

    def at(self, n: float) -> float:
        """Piecewise-linear interpolation; out-of-range N is rejected."""
        if n < self.min_n or n > self.max_n:
            raise ValueError(f"N = {n} outside [{self.min_n}, {self.max_n}]")
        return float(np.interp(n, self.ns, self.iterations))


def iterations_to_converge(run_one, ns: list[int]) -> IterationsCurve:
    """Build an IterationsCurve by running an experiment per N.

    run_one(n) must return the iterations needed to converge, or None for a
    run that never converged (excluded, with a warning attached to the error
    if too few points remain).
    """
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("N values must be strictly increasing")
    kept_n, kept_it, skipped = [], [], []
    for n in ns:
        iters = run_one(n)
        if iters is None:
            skipped.append(n)
            continue
        kept_n.append(n)
        kept_it.append(float(iters))
    if len(kept_n) < 2:
        raise ValueError(f"too few converged runs (non-converged N: {skipped})")
    return IterationsCurve(tuple(kept_n), tuple(kept_it))


@dataclass(frozen=True)
class ConfigEstimate:
    """Estimated running time for every (N, b) split of a machine budget."""

    total: int
    rows: tuple[tuple[int, int, float, float, float], ...]
    # (N, b, iterations, mean_iter_time, est_total_time)

    @property
    def best(self) -> tuple[int, int, float, float, float]:
        return min(self.rows, key=lambda r: (r[4], r[0]))

    def row_for(self, n: int) -> tuple[int, int, float, float, float]:
        for r in self.rows:
            if r[0] == n:
                return r
        raise KeyError(n)

    def to_csv(self) -> str:
        lines = ["N,b,iterations,mean_iter_time,est_total_time"]
        for n, b, iters, mean_t, total_t in self.rows:
            lines.append(f"{n},{b},{iters!r},{mean_t!r},{total_t!r}")
        return "\n".join(lines) + "\n"


def mean_kth_arrival_times(
    latency: LatencyModel, total: int, mc_iters: int = 100_000, seed: int = 0
) -> np.ndarray:
    """Monte-Carlo E[k-th order statistic] of `total` draws, for k = 1..total.

    One shared sample matrix serves every k, so split comparisons are
    consistent and the whole table costs a single sort.
    """
    rng = rngmod.substream(seed, rngmod.DOMAIN_ANALYSIS)
    cols = [sample_durations(latency, w, rng, mc_iters) for w in range(total)]
    mat = np.column_stack(cols)
    mat.sort(axis=1)
    return mat.mean(axis=0)


def best_config(
    total: int,
    curve: IterationsCurve,
    latency: LatencyModel,
    mc_iters: int = 100_000,
    seed: int = 0,
) -> ConfigEstimate:
    """Estimated time to converge for every split N + b = total.

    time(N) = iterations(N) x mean time of the N-th arrival among `total`
    concurrently started workers.  The best row is the exact argmin.
    """
    if total < 1:
        raise ValueError("total must be >= 1")
    lo = max(1, curve.min_n)
    hi = min(total, curve.max_n)
    if lo > hi:
        raise ValueError("iterations curve does not cover any feasible N")
    mean_kth = mean_kth_arrival_times(latency, total, mc_iters, seed)
    rows = []
    for n in range(lo, hi + 1):
        iters = curve.at(n)
        mean_t = float(mean_kth[n - 1])
        rows.append((n, total - n, iters, mean_t, iters * mean_t))
    return ConfigEstimate(total, tuple(rows))


def durations_from_trace(trace: EventTrace) -> np.ndarray:
    """Per-message durations (last send minus first read), for replaying a
    recorded run as an empirical latency model."""
    records, _ = match_messages(trace)
    out = []
    for m in records:
        if not m.send_times:
            continue
        start = min(t for _, _, t in m.reads.values())
        out.append(max(m.send_times.values()) - start)
    return np.asarray(out)
