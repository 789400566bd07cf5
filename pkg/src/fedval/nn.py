"""Minimal dense-MLP trainer on flat float64 parameter vectors.

The federated layer treats a model as an opaque 1-D numpy array, so every
operation here maps (spec, flat params) -> numbers. Layout of the flat
vector, per consecutive layer pair (n_in, n_out): weights stored row-major
with shape (n_in, n_out), then the n_out biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ParamVector = np.ndarray  # 1-D float64, length == ModelSpec.param_count


class DivergenceError(RuntimeError):
    """Raised when a forward/backward pass produces non-finite numbers."""


@dataclass(frozen=True)
class ModelSpec:
    """Dense MLP shape: ReLU hidden layers, raw logits out."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation}")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """Per layer, the (weight, bias) slices into the flat vector."""
        out = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + n_in * n_out)
            b = slice(w.stop, w.stop + n_out)
            out.append((w, b))
            offset = b.stop
        return out


@dataclass
class GradSnapshot:
    """Flat gradient (same layout as the parameter vector) tagged with its round."""

    values: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.round_index < 0:
            raise ValueError("round_index must be non-negative")


@dataclass
class Batch:
    """Inputs in [0,1], integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D matrix")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs row count must equal labels length")
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _unpack(spec: ModelSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count:
        raise ValueError(
            f"param vector length {params.shape} does not match spec count {spec.param_count}"
        )
    layers = []
    for (w_sl, b_sl), (n_in, n_out) in zip(
        spec.layer_slices(), zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])
    ):
        layers.append((params[w_sl].reshape(n_in, n_out), params[b_sl]))
    return layers


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Seeded uniform(-s, s) weights with s = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    out = np.zeros(spec.param_count, dtype=np.float64)
    for (w_sl, b_sl), (n_in, n_out) in zip(
        spec.layer_slices(), zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])
    ):
        bound = math.sqrt(6.0 / (n_in + n_out))
        out[w_sl] = rng.uniform(-bound, bound, size=n_in * n_out)
        # biases stay zero
    return out


def _forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray):
    """Return (per-layer pre-activations, activations); last activation = logits."""
    layers = _unpack(spec, params)
    a = inputs
    pre, acts = [], [a]
    with np.errstate(invalid="ignore", over="ignore"):
        for i, (w, b) in enumerate(layers):
            z = a @ w + b
            pre.append(z)
            a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
            acts.append(a)
    if not np.all(np.isfinite(acts[-1])):
        raise DivergenceError("non-finite activations in forward pass")
    return pre, acts


def loss_and_grad(spec: ModelSpec, params: ParamVector, batch: Batch) -> tuple[float, GradSnapshot]:
    """Mean softmax cross-entropy over the batch plus its flat gradient."""
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"input dim {batch.inputs.shape[1]} does not match model input {spec.input_dim}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ValueError("labels out of range for the model's output layer")

    pre, acts = _forward(spec, params, batch.inputs)
    logits = acts[-1]
    n = logits.shape[0]

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), batch.labels]))
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")

    probs = np.exp(shifted - log_z[:, None])
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    layers = _unpack(spec, params)
    grad = np.empty(spec.param_count, dtype=np.float64)
    slices = spec.layer_slices()
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl = slices[i]
        grad[w_sl] = (acts[i].T @ delta).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0.0)
    return loss, GradSnapshot(grad)


def sgd_step(params: ParamVector, grad: GradSnapshot, eta: float) -> ParamVector:
    """params - eta * grad, as a new vector."""
    values = grad.values if isinstance(grad, GradSnapshot) else np.asarray(grad)
    if values.shape != np.shape(params):
        raise ValueError("params and grad lengths differ")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    return np.asarray(params, dtype=np.float64) - eta * values


def evaluate_accuracy(spec: ModelSpec, params: ParamVector, dataset) -> float:
    """Fraction of argmax(logits) == label; arg ties resolve to the lowest class.

    dataset is anything exposing labels plus an inputs or images matrix.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    inputs = dataset.inputs if hasattr(dataset, "inputs") else dataset.images
    _, acts = _forward(spec, params, inputs)
    pred = np.argmax(acts[-1], axis=1)
    return float(np.mean(pred == dataset.labels))
