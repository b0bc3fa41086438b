"""Construct runtime objects (model, data, schedules, rules) from a config."""
from __future__ import annotations

import numpy as np

from . import rng as rngmod
from .config import ASYNC, SYNC, ExperimentConfig
from .data import Dataset, generate_synthetic, load_csv
from .models import Model
from .optim import EXPONENTIAL_DECAY, LINEAR_ANNEAL, LrSchedule
from .protocol import UpdateRule
from .timing import LatencyModel, TimingSplit


def build_model(cfg: ExperimentConfig) -> Model:
    return Model(cfg.model.kind, cfg.model.layer_dims, cfg.model.activation)


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    if ds.csv_train:
        train = load_csv(ds.csv_train, split="train")
        test = load_csv(ds.csv_test, split="test") if ds.csv_test else train
        return train, test
    # One shared task; disjoint point draws per split.
    task_seed = int(rngmod.substream(ds.seed, rngmod.DOMAIN_DATA, 0).integers(2**63))
    train_seed = int(rngmod.substream(ds.seed, rngmod.DOMAIN_DATA, 1).integers(2**63))
    test_seed = int(rngmod.substream(ds.seed, rngmod.DOMAIN_DATA, 2).integers(2**63))
    train = generate_synthetic(
        ds.kind, ds.n_train, ds.d, train_seed, ds.noise, "train", task_seed=task_seed
    )
    test = generate_synthetic(
        ds.kind, ds.n_test, ds.d, test_seed, ds.noise, "test", task_seed=task_seed
    )
    return train, test


def batches_per_epoch(cfg: ExperimentConfig, train: Dataset) -> int:
    return max(1, train.n // cfg.batch_b)


def build_schedule(cfg: ExperimentConfig, train: Dataset) -> LrSchedule:
    s = cfg.schedule
    gamma0 = s.gamma0
    st = cfg.staleness
    if cfg.protocol == "serial-stale" and st.target_mean >= st.lr_threshold:
        gamma0 *= st.lr_multiplier
    # The schedule index t counts updates: sync iterations aggregate
    # workers_n gradients per update, async and serial apply one at a time.
    n_for_schedule = cfg.workers_n if cfg.protocol == SYNC else 1
    return LrSchedule(
        kind=s.kind,
        gamma0=gamma0,
        beta=s.beta,
        workers_n=n_for_schedule,
        batches_per_epoch=batches_per_epoch(cfg, train),
        anneal_start=s.anneal_start,
        anneal_end=s.anneal_end,
        scale_with_n=s.scale_with_n,
    )


def build_rule(cfg: ExperimentConfig, train: Dataset) -> UpdateRule:
    return UpdateRule(
        schedule=build_schedule(cfg, train),
        optimizer=cfg.optimizer.kind,
        decay=cfg.optimizer.decay,
        momentum=cfg.optimizer.momentum,
        epsilon=cfg.optimizer.epsilon,
        ema_alpha=cfg.ema_alpha,
    )


def build_latency(cfg: ExperimentConfig) -> LatencyModel:
    lt = cfg.latency
    samples: tuple[float, ...] = ()
    if lt.kind == "empirical":
        samples = load_latency_samples(lt.samples_path)
    return LatencyModel(
        kind=lt.kind,
        mean=lt.mean,
        rate=lt.rate,
        mu=lt.mu,
        sigma=lt.sigma,
        base=lt.base,
        fast_fraction=lt.fast_fraction,
        slow_multiplier=lt.slow_multiplier,
        shape=lt.shape,
        offset=lt.offset,
        samples=samples,
        per_worker_bias=lt.per_worker_bias,
    )


def load_latency_samples(path: str) -> tuple[float, ...]:
    """One duration per line, seconds."""
    if not path:
        raise ValueError("empirical latency needs latency.samples_path")
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(float(line))
    return tuple(out)


def build_timing(cfg: ExperimentConfig) -> TimingSplit:
    t = cfg.timing
    return TimingSplit(t.forward_frac, t.backward_frac, t.comm_frac)


def batch_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Per-worker mini-batch stream; draws are consumed in step order."""
    return rngmod.substream(seed, rngmod.DOMAIN_BATCH, worker_id)


def latency_rng(seed: int, worker_id: int) -> np.random.Generator:
    return rngmod.substream(seed, rngmod.DOMAIN_LATENCY, worker_id)


def init_rng(seed: int) -> np.random.Generator:
    return rngmod.substream(seed, rngmod.DOMAIN_INIT)


def total_workers(cfg: ExperimentConfig) -> int:
    if cfg.protocol == SYNC:
        return cfg.workers_n + cfg.backups_b
    if cfg.protocol == ASYNC:
        return cfg.workers_n
    return 1
