"""Per-evaluation metrics rows, CSV serialization, convergence detection."""
from __future__ import annotations

import math
from dataclasses import dataclass

METRICS_HEADER = "epoch,time_s,train_loss,test_metric,lr,staleness_mean,eval_target"


@dataclass(frozen=True)
class MetricsRow:
    epoch: float
    time_s: float
    train_loss: float
    test_metric: float
    lr: float
    staleness_mean: float
    eval_target: str  # "raw" | "ema"


def format_metrics_csv(rows: list[MetricsRow]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            f"{r.epoch!r},{r.time_s!r},{r.train_loss!r},{r.test_metric!r},"
            f"{r.lr!r},{r.staleness_mean!r},{r.eval_target}"
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: list[MetricsRow], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(format_metrics_csv(rows))


def read_metrics_csv(path: str) -> list[MetricsRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            rows.append(
                MetricsRow(
                    float(parts[0]),
                    float(parts[1]),
                    float(parts[2]),
                    float(parts[3]),
                    float(parts[4]),
                    float(parts[5]),
                    parts[6],
                )
            )
    return rows


@dataclass(frozen=True)
class ConvergenceCriterion:
    """Reach `epsilon` on the test metric and hold it for `patience` rows."""

    epsilon: float
    patience: int = 3
    direction: str = "minimize"

    def __post_init__(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.direction not in ("minimize", "maximize"):
            raise ValueError("direction must be minimize or maximize")

    def met(self, value: float) -> bool:
        if math.isnan(value):
            return False
        if self.direction == "minimize":
            return value <= self.epsilon
        return value >= self.epsilon


def _first_sustained(values: list[float], crit: ConvergenceCriterion) -> int | None:
    run = 0
    for i, v in enumerate(values):
        run = run + 1 if crit.met(v) else 0
        if run >= crit.patience:
            return i - crit.patience + 1
    return None


def epochs_to_epsilon(rows: list[MetricsRow], crit: ConvergenceCriterion) -> float | None:
    """First epoch at which the test metric meets epsilon and stays met."""
    idx = _first_sustained([r.test_metric for r in rows], crit)
    return None if idx is None else rows[idx].epoch


def time_to_epsilon(rows: list[MetricsRow], crit: ConvergenceCriterion) -> float | None:
    idx = _first_sustained([r.test_metric for r in rows], crit)
    return None if idx is None else rows[idx].time_s


def epochs_to_own_convergence(
    rows: list[MetricsRow], rel_slack: float = 0.05, patience: int = 1
) -> float | None:
    """First epoch within `rel_slack` of the run's own final test metric.

    The threshold is final + rel_slack * (first - final) for minimized
    metrics, mirrored for maximized ones; the final row always qualifies.
    """
    if not rows:
        return None
    first, final = rows[0].test_metric, rows[-1].test_metric
    span = abs(first - final)
    if final <= first:
        crit = ConvergenceCriterion(final + rel_slack * span, patience, "minimize")
    else:
        crit = ConvergenceCriterion(final - rel_slack * span, patience, "maximize")
    return epochs_to_epsilon(rows, crit)
