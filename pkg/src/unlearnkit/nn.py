"""Minimal dense feed-forward classifier with manual backprop.

A plain-numpy multilayer perceptron: rectifier hidden layers, a linear
logit layer, stabilized cross-entropy, and exact gradients with respect to
both parameters and inputs. One hidden layer is designated as the feature
map whose activations feed distribution-level comparisons; by default this
is the last hidden layer (the penultimate layer of the network).

Everything here is a pure function of its arguments: models are never
mutated in place and ``sgd_step`` returns a fresh model, so values are safe
to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConsistencyError, DataFormatError, NumericError

_MODEL_MAGIC = b"UNLKMLP1"


@dataclass(frozen=True)
class MlpModel:
    """Dense classifier: weights[i] has shape (layer_dims[i], layer_dims[i+1])."""

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    feature_layer_index: int | None
    seed: int

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_hidden(self) -> int:
        return self.n_layers - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer cache from a (possibly truncated) forward pass.

    ``pre_acts[i]`` / ``acts[i]`` are the pre- and post-activation values of
    affine layer ``i``; only the first ``n_layers_computed`` layers are
    present. The trace keeps a reference to the model that produced it so
    backward passes can reject mismatched traces.
    """

    model: MlpModel
    inputs: np.ndarray
    pre_acts: tuple[np.ndarray, ...]
    acts: tuple[np.ndarray, ...]
    n_layers_computed: int

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class GradientBundle:
    """Parameter and input gradients of one scalar loss."""

    weight_grads: tuple[np.ndarray, ...]
    bias_grads: tuple[np.ndarray, ...]
    input_grads: np.ndarray


def init_model(
    layer_dims: list[int] | tuple[int, ...],
    feature_layer_index: int | None = None,
    seed: int = 0,
) -> MlpModel:
    """Build a deterministic model for the given seed.

    Weights are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)],
    biases start at zero. ``feature_layer_index`` is a 0-based hidden-layer
    index; ``None`` selects the last hidden layer when one exists.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ConfigError(f"need at least 2 layer dims (input, classes), got {dims}")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    n_hidden = len(dims) - 2
    if feature_layer_index is None and n_hidden > 0:
        feature_layer_index = n_hidden - 1
    if feature_layer_index is not None and not (0 <= feature_layer_index < n_hidden):
        raise ConfigError(
            f"feature_layer_index {feature_layer_index} invalid for {n_hidden} hidden layer(s)"
        )
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, tuple(weights), tuple(biases), feature_layer_index, int(seed))


def _check_batch(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} incompatible with input dim {model.input_dim}"
        )
    return batch


def _run_layers(model: MlpModel, batch: np.ndarray, n_layers: int) -> ForwardTrace:
    a = batch
    pre_acts = []
    acts = []
    for i in range(n_layers):
        z = a @ model.weights[i] + model.biases[i]
        pre_acts.append(z)
        # last affine layer emits raw logits, all earlier layers are rectified
        a = np.maximum(z, 0.0) if i < model.n_layers - 1 else z
        acts.append(a)
    return ForwardTrace(model, batch, tuple(pre_acts), tuple(acts), n_layers)


def forward(model: MlpModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Full forward pass; returns (logits, trace)."""
    batch = _check_batch(model, batch)
    trace = _run_layers(model, batch, model.n_layers)
    return trace.acts[-1], trace


def feature_extract(model: MlpModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Activations of the designated feature layer; trace reusable by feature_vjp."""
    if model.feature_layer_index is None:
        raise ValueError("model has no hidden layer to extract features from")
    batch = _check_batch(model, batch)
    trace = _run_layers(model, batch, model.feature_layer_index + 1)
    return trace.acts[model.feature_layer_index], trace


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact logit gradient.

    Stabilized with log-sum-exp so saturated logits (|logit| up to 1e4)
    neither overflow nor produce NaN.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, n_classes = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels out of range for {n_classes} classes")
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    loss = float(np.mean(lse[:, 0] - logits[np.arange(n), labels]))
    dlogits = np.exp(logits - lse)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def _check_trace(model: MlpModel, trace: ForwardTrace) -> None:
    if trace.model is not model:
        raise ConsistencyError("trace was produced by a different model")


def backward(model: MlpModel, trace: ForwardTrace, dlogits: np.ndarray) -> GradientBundle:
    """Backprop dlogits through a full trace; returns parameter and input grads."""
    _check_trace(model, trace)
    if trace.n_layers_computed != model.n_layers:
        raise ConsistencyError("trace is truncated; run forward(), not feature_extract()")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.acts[-1].shape:
        raise ValueError(
            f"dlogits shape {dlogits.shape} does not match logits {trace.acts[-1].shape}"
        )
    weight_grads = []
    bias_grads = []
    delta = dlogits
    for i in range(model.n_layers - 1, -1, -1):
        below = trace.acts[i - 1] if i > 0 else trace.inputs
        weight_grads.append(below.T @ delta)
        bias_grads.append(delta.sum(axis=0))
        delta = delta @ model.weights[i].T
        if i > 0:
            delta = delta * (trace.pre_acts[i - 1] > 0)
    weight_grads.reverse()
    bias_grads.reverse()
    return GradientBundle(tuple(weight_grads), tuple(bias_grads), delta)


def feature_vjp(model: MlpModel, trace: ForwardTrace, dfeatures: np.ndarray) -> np.ndarray:
    """Input gradient of <dfeatures, F(x)>: the feature-Jacobian transpose applied to dfeatures."""
    _check_trace(model, trace)
    j = model.feature_layer_index
    if j is None:
        raise ValueError("model has no feature layer")
    if trace.n_layers_computed < j + 1:
        raise ConsistencyError("trace does not reach the feature layer")
    dfeatures = np.asarray(dfeatures, dtype=np.float64)
    if dfeatures.shape != trace.acts[j].shape:
        raise ValueError(
            f"dfeatures shape {dfeatures.shape} does not match features {trace.acts[j].shape}"
        )
    delta = dfeatures
    for i in range(j, -1, -1):
        delta = delta * (trace.pre_acts[i] > 0)
        delta = delta @ model.weights[i].T
    return delta


def sgd_step(model: MlpModel, grads: GradientBundle, lr: float) -> MlpModel:
    """One plain gradient step; pure (returns a new model)."""
    if len(grads.weight_grads) != model.n_layers:
        raise ValueError("gradient bundle does not match model layer count")
    for dw, db, w, b in zip(grads.weight_grads, grads.bias_grads, model.weights, model.biases):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ValueError("gradient shapes do not match model parameters")
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError("non-finite gradient entries in sgd_step")
    weights = tuple(w - lr * dw for w, dw in zip(model.weights, grads.weight_grads))
    biases = tuple(b - lr * db for b, db in zip(model.biases, grads.bias_grads))
    return MlpModel(model.layer_dims, weights, biases, model.feature_layer_index, model.seed)


def model_to_bytes(model: MlpModel) -> bytes:
    """Flat little-endian record: header, then parameters in layer order, row-major."""
    feat = 0xFFFFFFFF if model.feature_layer_index is None else model.feature_layer_index
    parts = [
        _MODEL_MAGIC,
        struct.pack("<I", len(model.layer_dims)),
        struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims),
        struct.pack("<IQ", feat, model.seed),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(raw: bytes) -> MlpModel:
    if raw[: len(_MODEL_MAGIC)] != _MODEL_MAGIC:
        raise DataFormatError("not a model file (bad magic)")
    off = len(_MODEL_MAGIC)
    try:
        (n_dims,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{n_dims}I", raw, off)
        off += 4 * n_dims
        feat, seed = struct.unpack_from("<IQ", raw, off)
        off += 12
    except struct.error as exc:
        raise DataFormatError(f"truncated model header: {exc}") from exc
    if len(dims) < 2:
        raise DataFormatError("model file has fewer than 2 layer dims")
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        need = 8 * (fan_in * fan_out + fan_out)
        if off + need > len(raw):
            raise DataFormatError("model file truncated inside parameter block")
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    if off != len(raw):
        raise DataFormatError("trailing bytes after model parameters")
    feature_layer_index = None if feat == 0xFFFFFFFF else int(feat)
    return MlpModel(tuple(int(d) for d in dims), tuple(weights), tuple(biases),
                    feature_layer_index, int(seed))


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
