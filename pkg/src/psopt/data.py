"""Datasets: synthetic generation, CSV loading, mini-batch sampling."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"
_KINDS = (REGRESSION, CLASSIFICATION)

# Distance of each class mean from the origin.  The noise parameter sets the
# within-class spread, so noise ~ 1 gives slightly overlapping classes and
# small noise gives a nearly separable problem.
_CLASS_SEPARATION = 1.25


@dataclass(frozen=True)
class Dataset:
    """A single split (train or test) of a supervised learning problem."""

    inputs: np.ndarray  # (n, d) float64
    targets: np.ndarray  # (n,) float64
    split: str = "train"

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-d array")
        if self.targets.shape != (self.inputs.shape[0],):
            raise ValueError("row counts of inputs and targets must match")
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset needs at least one row")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]


def generate_synthetic(
    kind: str,
    n: int,
    d: int,
    seed: int,
    noise: float = 1.0,
    split: str = "train",
    task_seed: int | None = None,
) -> Dataset:
    """Generate a reproducible synthetic dataset.

    Regression: y = X w* + noise * eps with X, w*, eps standard normal.
    Classification: two balanced classes at +/- _CLASS_SEPARATION * noise along
    a random direction, blurred with isotropic noise.  Rows are shuffled.

    The ground truth (w*, class direction) comes from task_seed, the sampled
    points from seed; a train and a test split share the task_seed but use
    distinct point seeds, which makes them disjoint draws from one problem.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown dataset kind: {kind!r}")
    if n < 2:
        raise ValueError("n must be >= 2")
    if d < 1:
        raise ValueError("d must be >= 1")
    task_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(seed if task_seed is None else task_seed))
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if kind == REGRESSION:
        w_true = task_rng.standard_normal(d)
        x = rng.standard_normal((n, d))
        y = x @ w_true + noise * rng.standard_normal(n)
        return Dataset(x, y, split)
    # Balanced binary classification, symmetric about the origin so a linear
    # separator through the origin exists.
    direction = task_rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    n_pos = n // 2
    n_neg = n - n_pos
    center = _CLASS_SEPARATION * direction
    x_neg = -center + noise * rng.standard_normal((n_neg, d))
    x_pos = center + noise * rng.standard_normal((n_pos, d))
    x = np.vstack([x_neg, x_pos])
    y = np.concatenate([np.zeros(n_neg), np.ones(n_pos)])
    order = rng.permutation(n)
    return Dataset(x[order], y[order], split)


def load_csv(path: str, split: str = "train") -> Dataset:
    """Load a dataset from CSV with header columns x0..x{d-1},y.

    Non-numeric cells and malformed headers are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"x{i}" for i in range(d)] + ["y"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header must be x0..x{d-1},y")
        xs: list[list[float]] = []
        ys: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d + 1} cells")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell") from None
            xs.append(vals[:d])
            ys.append(vals[d])
    if not xs:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), split)


def sample_batch(
    data: Dataset, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a mini-batch with replacement."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, data.n, size=batch_size)
    return data.inputs[idx], data.targets[idx]
