"""Experiment configuration: typed dataclasses plus a strict flat file format.

Config files are plain text, one `key = value` per line with dotted section
keys (`optimizer.decay = 0.9`), `#` comments, and blank lines.  Every key is
typed; unknown keys are errors.  Echoing a resolved config and re-parsing it
reproduces the run bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, get_args, get_origin

ASYNC = "async"
SYNC = "sync"
SERIAL = "serial"
SERIAL_STALE = "serial-stale"
PROTOCOLS = (ASYNC, SYNC, SERIAL, SERIAL_STALE)

BACKEND_SIM = "sim"
BACKEND_CONCURRENT = "concurrent"
BACKENDS = (BACKEND_SIM, BACKEND_CONCURRENT)


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic-regression"
    layer_dims: tuple[int, ...] = (2,)
    activation: str = "tanh"


@dataclass(frozen=True)
class DataSpec:
    kind: str = "classification"
    n_train: int = 400
    n_test: int = 400
    d: int = 2
    noise: float = 1.0
    seed: int = 1
    csv_train: str = ""
    csv_test: str = ""


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    decay: float = 0.9
    momentum: float = 0.9
    epsilon: float = 1e-10


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "constant"
    gamma0: float = 0.1
    beta: float = 0.94
    scale_with_n: bool = False
    anneal_start: float = 0.0
    anneal_end: float = 0.0


@dataclass(frozen=True)
class LatencySpec:
    kind: str = "deterministic"
    mean: float = 1.0
    rate: float = 1.0
    mu: float = 0.0
    sigma: float = 1.0
    base: float = 1.0
    fast_fraction: float = 0.95
    slow_multiplier: float = 10.0
    shape: float = 2.5
    offset: float = 0.0
    samples_path: str = ""
    per_worker_bias: tuple[float, ...] = ()


@dataclass(frozen=True)
class TimingSpec:
    forward_frac: float = 0.4
    backward_frac: float = 0.4
    comm_frac: float = 0.2
    apply_overhead: float = 0.0


@dataclass(frozen=True)
class StalenessSpec:
    target_mean: float = 0.0
    ramp_epochs: float = 3.0
    distribution: str = "uniform-integer"  # or "fixed"
    lr_threshold: float = 20.0
    lr_multiplier: float = 1.0  # applied to gamma0 when target_mean >= lr_threshold


@dataclass(frozen=True)
class TimeoutSpec:
    deadline: float = 1.0
    n_min: int = 1
    max_retries: int = 3


@dataclass(frozen=True)
class RuntimeSpec:
    artificial_delay: bool = False
    delay_scale: float = 1.0  # real seconds per simulated second of latency
    quiet_period: float = 30.0  # watchdog: abort after this many silent seconds


@dataclass(frozen=True)
class ConvergenceSpec:
    epsilon: float = math.nan  # nan = no target configured
    patience: int = 3
    direction: str = "minimize"


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = SERIAL
    backend: str = BACKEND_SIM
    workers_n: int = 1
    backups_b: int = 0
    shards_m: int = 1
    batch_b: int = 8
    seed: int = 0
    max_epochs: int = 10
    eval_every: float = 1.0
    ema_alpha: float = 0.99
    clip_norm: float = 0.0  # 0 disables clipping (asynchronous workers only)
    sample_block_n: int = 1  # serial runs draw batch_b as blocks from this many worker streams
    sync_policy: str = "backup"  # "backup" | "timeout"
    model: ModelSpec = field(default_factory=ModelSpec)
    dataset: DataSpec = field(default_factory=DataSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    latency: LatencySpec = field(default_factory=LatencySpec)
    timing: TimingSpec = field(default_factory=TimingSpec)
    staleness: StalenessSpec = field(default_factory=StalenessSpec)
    timeout: TimeoutSpec = field(default_factory=TimeoutSpec)
    runtime: RuntimeSpec = field(default_factory=RuntimeSpec)
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)


_SECTIONS = {
    "model": ModelSpec,
    "dataset": DataSpec,
    "optimizer": OptimizerSpec,
    "schedule": ScheduleSpec,
    "latency": LatencySpec,
    "timing": TimingSpec,
    "staleness": StalenessSpec,
    "timeout": TimeoutSpec,
    "runtime": RuntimeSpec,
    "convergence": ConvergenceSpec,
}


def _key_table() -> dict[str, type]:
    """Dotted key -> value type, in declaration order."""
    table: dict[str, Any] = {}
    for f in fields(ExperimentConfig):
        if f.name in _SECTIONS:
            for sub in fields(_SECTIONS[f.name]):
                table[f"{f.name}.{sub.name}"] = sub.type
        else:
            table[f.name] = f.type
    return table


def _parse_value(key: str, text: str, typ: Any) -> Any:
    text = text.strip()
    if typ in (int, "int"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if typ in (float, "float"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if typ in (bool, "bool"):
        if text in ("true", "True"):
            return True
        if text in ("false", "False"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    if typ in (str, "str"):
        return text
    # tuple[int, ...] / tuple[float, ...], possibly as a string annotation
    elem = int if "int" in str(typ) else float
    if not text:
        return ()
    try:
        return tuple(elem(part.strip()) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated {elem.__name__}s") from None


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def config_from_dict(flat: dict[str, str]) -> ExperimentConfig:
    """Build a config from dotted-key strings; unknown keys are errors."""
    table = _key_table()
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, raw in flat.items():
        if key not in table:
            raise ConfigError(f"unknown config key: {key!r}")
        value = _parse_value(key, raw, table[key])
        if "." in key:
            section, sub = key.split(".", 1)
            sections[section][sub] = value
        else:
            top[key] = value
    cfg = ExperimentConfig(
        **top,
        **{name: cls(**sections[name]) for name, cls in _SECTIONS.items()},
    )
    validate_config(cfg)
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value.split("#", 1)[0].strip()
    return config_from_dict(flat)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_flat(cfg: ExperimentConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in fields(_SECTIONS[f.name]):
                out[f"{f.name}.{sub.name}"] = _format_value(getattr(value, sub.name))
        else:
            out[f.name] = _format_value(value)
    return out


def format_config(cfg: ExperimentConfig) -> str:
    """Echo a fully resolved config; parse_config(format_config(c)) == c."""
    return "".join(f"{k} = {v}\n" for k, v in config_to_flat(cfg).items())


def _apply_key(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    table = _key_table()
    if key not in table:
        raise ConfigError(f"unknown config key: {key!r}")
    value = _parse_value(key, raw, table[key])
    if "." in key:
        section, sub = key.split(".", 1)
        new_section = replace(getattr(cfg, section), **{sub: value})
        return replace(cfg, **{section: new_section})
    return replace(cfg, **{key: value})


def override(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    """Return a copy of cfg with one dotted key replaced by a parsed value."""
    out = _apply_key(cfg, key, raw)
    validate_config(out)
    return out


def updated(cfg: ExperimentConfig, updates: dict[str, str]) -> ExperimentConfig:
    """Apply several dotted-key overrides, validating only the final config."""
    out = cfg
    for key, raw in updates.items():
        out = _apply_key(out, key, raw)
    validate_config(out)
    return out


def validate_config(cfg: ExperimentConfig) -> None:
    def fail(msg: str) -> None:
        raise ConfigError(msg)

    if cfg.protocol not in PROTOCOLS:
        fail(f"protocol must be one of {PROTOCOLS}")
    if cfg.backend not in BACKENDS:
        fail(f"backend must be one of {BACKENDS}")
    if cfg.workers_n < 1:
        fail("workers_n must be >= 1")
    if cfg.backups_b < 0:
        fail("backups_b must be >= 0")
    if cfg.backups_b > 0 and cfg.protocol != SYNC:
        fail("backups_b > 0 requires protocol = sync")
    if cfg.shards_m < 1:
        fail("shards_m must be >= 1")
    if cfg.batch_b < 1:
        fail("batch_b must be >= 1")
    if not 0.0 <= cfg.ema_alpha <= 1.0:
        fail("ema_alpha must be in [0, 1]")
    if cfg.clip_norm < 0:
        fail("clip_norm must be >= 0")
    if cfg.max_epochs < 1:
        fail("max_epochs must be >= 1")
    if cfg.eval_every <= 0:
        fail("eval_every must be positive")
    if cfg.sample_block_n < 1:
        fail("sample_block_n must be >= 1")
    if cfg.batch_b % cfg.sample_block_n != 0:
        fail("batch_b must be divisible by sample_block_n")
    if cfg.sync_policy not in ("backup", "timeout"):
        fail("sync_policy must be backup or timeout")
    if cfg.protocol in (SERIAL, SERIAL_STALE):
        if cfg.workers_n != 1:
            fail(f"{cfg.protocol} requires workers_n = 1")
        if cfg.shards_m != 1:
            fail(f"{cfg.protocol} requires shards_m = 1")
        if cfg.backend != BACKEND_SIM:
            fail(f"{cfg.protocol} runs on the sim backend only")
    if cfg.protocol != SERIAL_STALE and cfg.staleness.target_mean != 0.0:
        fail("staleness.target_mean is only meaningful for serial-stale")
    if cfg.staleness.target_mean < 0:
        fail("staleness.target_mean must be >= 0")
    if cfg.staleness.distribution not in ("fixed", "uniform-integer"):
        fail("staleness.distribution must be fixed or uniform-integer")
    if cfg.staleness.ramp_epochs < 0:
        fail("staleness.ramp_epochs must be >= 0")
    if cfg.model.kind == "mlp":
        if cfg.model.layer_dims[0] != cfg.dataset.d:
            fail("model.layer_dims[0] must equal dataset.d")
    elif cfg.model.layer_dims != (cfg.dataset.d,):
        fail("linear/logistic models need model.layer_dims = dataset.d")
    n_layers = max(1, len(cfg.model.layer_dims) - 1) if cfg.model.kind == "mlp" else 1
    if cfg.shards_m > n_layers:
        fail("shards_m cannot exceed the number of model layers")
    if cfg.convergence.patience < 1:
        fail("convergence.patience must be >= 1")
    if cfg.convergence.direction not in ("minimize", "maximize"):
        fail("convergence.direction must be minimize or maximize")
    if cfg.timeout.deadline <= 0 or cfg.timeout.n_min < 1 or cfg.timeout.max_retries < 0:
        fail("timeout section is invalid")
    if cfg.runtime.delay_scale <= 0 or cfg.runtime.quiet_period <= 0:
        fail("runtime section is invalid")
