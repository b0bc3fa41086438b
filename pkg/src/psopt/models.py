"""Small differentiable models over layer-partitioned parameters.

Models are deliberately tiny and hand-differentiated so every gradient can be
audited against the central-difference oracle.  Parameters are kept as one
flat vector per layer; layers are assigned to server shards via a shard map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CLASSIFICATION, Dataset

LINEAR_REGRESSION = "linear-regression"
LOGISTIC_REGRESSION = "logistic-regression"
MLP = "mlp"
_KINDS = (LINEAR_REGRESSION, LOGISTIC_REGRESSION, MLP)

_ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class Model:
    """Model family descriptor.

    linear-regression / logistic-regression: layer_dims = (d,), a single
    parameter layer holding the weight vector (no bias; synthetic data is
    symmetric about the origin).  mlp: layer_dims = (d, h1, ..., 1), one
    parameter layer per weight matrix, biases packed after weights; the final
    layer emits a logit for binary classification.
    """

    kind: str
    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind: {self.kind!r}")
        dims = tuple(int(v) for v in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if any(v < 1 for v in dims):
            raise ValueError("layer_dims must be positive")
        if self.kind == MLP:
            if len(dims) < 2:
                raise ValueError("mlp needs at least (d, out) dims")
            if dims[-1] != 1:
                raise ValueError("mlp output layer must have width 1")
            if self.activation not in _ACTIVATIONS:
                raise ValueError(f"unknown activation: {self.activation!r}")
        elif len(dims) != 1:
            raise ValueError(f"{self.kind} takes layer_dims = (d,)")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_layers(self) -> int:
        if self.kind == MLP:
            return len(self.layer_dims) - 1
        return 1

    def layer_sizes(self) -> tuple[int, ...]:
        if self.kind == MLP:
            dims = self.layer_dims
            return tuple(
                dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1)
            )
        return (self.layer_dims[0],)

    @property
    def param_count(self) -> int:
        return sum(self.layer_sizes())

    @property
    def is_classifier(self) -> bool:
        return self.kind in (LOGISTIC_REGRESSION, MLP)


def default_shard_map(n_layers: int, n_shards: int) -> tuple[int, ...]:
    """Assign layers to shards in contiguous balanced blocks."""
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    if n_shards > n_layers:
        raise ValueError("more shards than layers")
    bounds = np.linspace(0, n_layers, n_shards + 1).astype(int)
    out = np.empty(n_layers, dtype=int)
    for j in range(n_shards):
        out[bounds[j] : bounds[j + 1]] = j
    return tuple(int(v) for v in out)


@dataclass(frozen=True)
class LayeredParams:
    """Model parameters split into per-layer vectors plus a shard assignment."""

    layers: tuple[np.ndarray, ...]
    shard_map: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.layers) != len(self.shard_map):
            raise ValueError("shard_map must assign every layer")
        shards = sorted(set(self.shard_map))
        if shards != list(range(len(shards))):
            raise ValueError("shard ids must be contiguous from 0")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_shards(self) -> int:
        return max(self.shard_map) + 1

    @property
    def dim(self) -> int:
        return sum(v.size for v in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.layers])

    def copy(self) -> "LayeredParams":
        return LayeredParams(tuple(v.copy() for v in self.layers), self.shard_map)


@dataclass(frozen=True)
class LayeredGradient:
    """Mini-batch gradient with the same per-layer structure as the params."""

    layers: tuple[np.ndarray, ...]
    batch_size: int

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.layers])


def params_from_flat(
    model: Model, flat: np.ndarray, shard_map: tuple[int, ...] | None = None
) -> LayeredParams:
    sizes = model.layer_sizes()
    if flat.size != sum(sizes):
        raise ValueError("flat vector has wrong length")
    if shard_map is None:
        shard_map = default_shard_map(model.n_layers, 1)
    layers = []
    off = 0
    for s in sizes:
        layers.append(np.asarray(flat[off : off + s], dtype=float).copy())
        off += s
    return LayeredParams(tuple(layers), shard_map)


def init_params(
    model: Model, rng: np.random.Generator, n_shards: int = 1
) -> LayeredParams:
    """Initialize parameters: zeros for the linear models, scaled normal
    weights with zero biases for the MLP."""
    shard_map = default_shard_map(model.n_layers, n_shards)
    if model.kind != MLP:
        return LayeredParams((np.zeros(model.layer_dims[0]),), shard_map)
    layers = []
    dims = model.layer_dims
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        b = np.zeros(fan_out)
        layers.append(np.concatenate([w.ravel(), b]))
    return LayeredParams(tuple(layers), shard_map)


def _unpack_mlp_layer(model: Model, idx: int, vec: np.ndarray):
    fan_in, fan_out = model.layer_dims[idx], model.layer_dims[idx + 1]
    w = vec[: fan_in * fan_out].reshape(fan_in, fan_out)
    b = vec[fan_in * fan_out :]
    return w, b


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _dact(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0).astype(float)


def _logits(model: Model, params: LayeredParams, x: np.ndarray) -> np.ndarray:
    """Forward pass; returns per-example prediction (logit or regression value)."""
    if model.kind in (LINEAR_REGRESSION, LOGISTIC_REGRESSION):
        return x @ params.layers[0]
    a = x
    last = model.n_layers - 1
    for i, vec in enumerate(params.layers):
        w, b = _unpack_mlp_layer(model, i, vec)
        z = a @ w + b
        a = z if i == last else _act(model.activation, z)
    return a[:, 0]


def batch_loss(model: Model, params: LayeredParams, x: np.ndarray, y: np.ndarray) -> float:
    """Mean per-example loss over an explicit batch."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError("batch features have wrong shape")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    z = _logits(model, params, x)
    if model.kind == LINEAR_REGRESSION:
        r = z - y
        return float(0.5 * np.mean(r * r))
    # Stable binary cross-entropy on logits: log(1 + e^z) - y z.
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def eval_loss(model: Model, params: LayeredParams, data: Dataset) -> float:
    """Mean loss over every row of the given split."""
    return batch_loss(model, params, data.inputs, data.targets)


def eval_metric(model: Model, params: LayeredParams, data: Dataset) -> float:
    """Test metric: classification error rate for classifiers, loss otherwise."""
    if model.is_classifier:
        z = _logits(model, params, data.inputs)
        pred = (z > 0).astype(float)
        return float(np.mean(pred != data.targets))
    return eval_loss(model, params, data)


def eval_gradient(
    model: Model, params: LayeredParams, x: np.ndarray, y: np.ndarray
) -> LayeredGradient:
    """Gradient of the mean loss over the batch, layer by layer."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError("batch features have wrong shape")
    batch = x.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if model.kind == LINEAR_REGRESSION:
        r = x @ params.layers[0] - y
        return LayeredGradient((x.T @ r / batch,), batch)
    if model.kind == LOGISTIC_REGRESSION:
        z = x @ params.layers[0]
        r = _sigmoid(z) - y
        return LayeredGradient((x.T @ r / batch,), batch)
    # MLP backprop.  dz carries the 1/batch factor so the dW/db sums are means.
    acts = [x]
    zs = []
    last = model.n_layers - 1
    a = x
    for i, vec in enumerate(params.layers):
        w, b = _unpack_mlp_layer(model, i, vec)
        z = a @ w + b
        zs.append(z)
        if i != last:
            a = _act(model.activation, z)
            acts.append(a)
    logit = zs[-1][:, 0]
    dz = ((_sigmoid(logit) - y) / batch)[:, None]
    grads: list[np.ndarray] = [np.empty(0)] * model.n_layers
    for i in range(last, -1, -1):
        w, _ = _unpack_mlp_layer(model, i, params.layers[i])
        dw = acts[i].T @ dz
        db = dz.sum(axis=0)
        grads[i] = np.concatenate([dw.ravel(), db])
        if i > 0:
            dz = (dz @ w.T) * _dact(model.activation, zs[i - 1])
    return LayeredGradient(tuple(grads), batch)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def finite_diff_gradient(
    model: Model,
    params: LayeredParams,
    x: np.ndarray,
    y: np.ndarray,
    step: float = 1e-5,
) -> LayeredGradient:
    """Central-difference gradient oracle, coordinate by coordinate."""
    grads = []
    for li, vec in enumerate(params.layers):
        g = np.zeros_like(vec)
        for i in range(vec.size):
            bumped = [v.copy() if k == li else v for k, v in enumerate(params.layers)]
            bumped[li][i] = vec[i] + step
            hi = batch_loss(model, LayeredParams(tuple(bumped), params.shard_map), x, y)
            bumped[li][i] = vec[i] - step
            lo = batch_loss(model, LayeredParams(tuple(bumped), params.shard_map), x, y)
            g[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return LayeredGradient(tuple(grads), x.shape[0])
