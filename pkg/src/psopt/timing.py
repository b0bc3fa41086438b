"""Worker latency models and per-layer forward/backward/send timing.

A worker's step duration is drawn from a LatencyModel, then split into
per-layer forward, backward, and send costs by a TimingSplit.  Parameters are
read as the forward pass reaches each layer; gradients are sent as the
backward pass finishes each layer, so lower layers are read earliest and their
gradients arrive last.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DETERMINISTIC = "deterministic"
EXPONENTIAL = "exponential"
LOGNORMAL = "lognormal"
PARETO_MIXTURE = "pareto-mixture"
EMPIRICAL = "empirical"
LATENCY_KINDS = (DETERMINISTIC, EXPONENTIAL, LOGNORMAL, PARETO_MIXTURE, EMPIRICAL)


@dataclass(frozen=True)
class LatencyModel:
    """Distribution over per-worker step durations (compute + communication).

    kinds and the parameters they use:
      deterministic: mean
      exponential:   rate (durations ~ Exp(rate), mean 1/rate)
      lognormal:     mu, sigma
      pareto-mixture: base, fast_fraction, slow_multiplier, shape.  With
        probability fast_fraction a Pareto draw with mean `base`, otherwise a
        Pareto draw with mean base * slow_multiplier; tail index `shape`.
      empirical:     resample from `samples`

    `offset` is added to every draw (a floor on step time, giving shifted
    distributions).  `per_worker_bias` optionally multiplies draws for worker
    k by per_worker_bias[k].
    """

    kind: str
    mean: float = 1.0
    rate: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    base: float = 1.0
    fast_fraction: float = 0.95
    slow_multiplier: float = 10.0
    shape: float = 2.5
    offset: float = 0.0
    samples: tuple[float, ...] = ()
    per_worker_bias: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in LATENCY_KINDS:
            raise ValueError(f"unknown latency kind: {self.kind!r}")
        if self.offset < 0:
            raise ValueError("offset must be >= 0")
        if self.kind == DETERMINISTIC and self.mean <= 0 and self.offset <= 0:
            raise ValueError("deterministic latency needs mean > 0")
        if self.kind == EXPONENTIAL and self.rate <= 0:
            raise ValueError("exponential latency needs rate > 0")
        if self.kind == PARETO_MIXTURE:
            if not 0.0 <= self.fast_fraction <= 1.0:
                raise ValueError("fast_fraction must be in [0, 1]")
            if self.base <= 0 or self.slow_multiplier < 1 or self.shape <= 1:
                raise ValueError("pareto-mixture needs base > 0, slow >= 1, shape > 1")
        if self.kind == EMPIRICAL:
            if not self.samples:
                raise ValueError("empirical latency needs samples")
            if any(s <= 0 for s in self.samples):
                raise ValueError("empirical samples must be positive")
        if any(b <= 0 for b in self.per_worker_bias):
            raise ValueError("per_worker_bias entries must be positive")

    def bias(self, worker_id: int) -> float:
        if not self.per_worker_bias:
            return 1.0
        return self.per_worker_bias[worker_id % len(self.per_worker_bias)]


def _pareto_mean(rng: np.random.Generator, mean: float, shape: float, size) -> np.ndarray:
    # Classical Pareto with minimum xm has mean xm * shape / (shape - 1);
    # numpy's pareto() draws (Pareto with xm=1) - 1.
    xm = mean * (shape - 1.0) / shape
    return xm * (1.0 + rng.pareto(shape, size=size))


def sample_durations(
    model: LatencyModel, worker_id: int, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Draw `size` positive durations for one worker."""
    if model.kind == DETERMINISTIC:
        out = np.full(size, model.mean)
    elif model.kind == EXPONENTIAL:
        out = rng.exponential(1.0 / model.rate, size=size)
    elif model.kind == LOGNORMAL:
        out = rng.lognormal(model.mu, model.sigma, size=size)
    elif model.kind == PARETO_MIXTURE:
        slow = rng.random(size) >= model.fast_fraction
        out = _pareto_mean(rng, model.base, model.shape, size)
        if slow.any():
            out[slow] = _pareto_mean(
                rng, model.base * model.slow_multiplier, model.shape, int(slow.sum())
            )
    else:
        out = rng.choice(np.asarray(model.samples), size=size)
    out = out * model.bias(worker_id) + model.offset
    if np.any(out <= 0):
        raise ValueError("sampled a non-positive duration")
    return out


def sample_duration(model: LatencyModel, worker_id: int, rng: np.random.Generator) -> float:
    return float(sample_durations(model, worker_id, rng, 1)[0])


@dataclass(frozen=True)
class TimingSplit:
    """How a sampled step duration is divided across phases and layers.

    Fractions apply to the whole duration and are spread uniformly over the
    layers.  backward + comm must be positive: a gradient cannot arrive at the
    server before the forward pass that produced it has finished.
    """

    forward_frac: float = 0.4
    backward_frac: float = 0.4
    comm_frac: float = 0.2

    def __post_init__(self) -> None:
        for v in (self.forward_frac, self.backward_frac, self.comm_frac):
            if v < 0:
                raise ValueError("timing fractions must be >= 0")
        if self.backward_frac + self.comm_frac <= 0:
            raise ValueError("backward_frac + comm_frac must be positive")

    def profile(self, duration: float, n_layers: int) -> "TimingProfile":
        f = duration * self.forward_frac / n_layers
        b = duration * self.backward_frac / n_layers
        c = duration * self.comm_frac / n_layers
        return TimingProfile((f,) * n_layers, (b,) * n_layers, (c,) * n_layers)


@dataclass(frozen=True)
class TimingProfile:
    """Absolute per-layer durations for one worker step."""

    forward_per_layer: tuple[float, ...]
    backward_per_layer: tuple[float, ...]
    comm_per_layer: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.forward_per_layer)
        if n < 1:
            raise ValueError("need at least one layer")
        if len(self.backward_per_layer) != n or len(self.comm_per_layer) != n:
            raise ValueError("per-layer duration lists must have equal length")
        if any(
            v < 0
            for v in self.forward_per_layer + self.backward_per_layer + self.comm_per_layer
        ):
            raise ValueError("durations must be >= 0")

    @property
    def n_layers(self) -> int:
        return len(self.forward_per_layer)


def layer_event_times(
    profile: TimingProfile, start: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer (read_time, send_time) for a step beginning at `start`.

    read(l) = start + sum_{i<l} forward(i)
    send(l) = start + sum forward + sum_{i>l} backward(i) + backward(l) + comm(l)

    Reads run bottom-up during the forward pass; sends run top-down during the
    backward pass, so read times increase with l and send times decrease.
    """
    fwd = np.asarray(profile.forward_per_layer)
    bwd = np.asarray(profile.backward_per_layer)
    comm = np.asarray(profile.comm_per_layer)
    reads = start + np.concatenate(([0.0], np.cumsum(fwd)[:-1]))
    # sum_{i>=l} backward(i), computed as a reversed cumulative sum.
    bwd_tail = np.cumsum(bwd[::-1])[::-1]
    sends = start + fwd.sum() + bwd_tail + comm
    return reads, sends
