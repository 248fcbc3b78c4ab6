"""Dense numeric core: small ReLU networks with hand-rolled float64 backprop.

Every operation here is deterministic given its inputs, so trained models can
be compared bit for bit across repeated runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """An array does not match the expected model or batch geometry."""


def param_count(layer_shapes: Sequence[tuple[int, int]]) -> int:
    """Number of weights plus biases implied by the layer geometry."""
    return int(sum(fi * fo + fo for fi, fo in layer_shapes))


@dataclass(frozen=True)
class ModelParams:
    """All weights and biases of a dense network in one flat float64 vector.

    ``layer_shapes`` lists (fan_in, fan_out) per layer. Each layer occupies
    fan_in*fan_out weight entries (row-major) followed by fan_out bias
    entries. Values are copied and validated finite on construction.
    """

    values: np.ndarray
    layer_shapes: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        shapes = tuple((int(fi), int(fo)) for fi, fo in self.layer_shapes)
        if not shapes:
            raise ShapeError("model needs at least one dense layer")
        for (_, fo_a), (fi_b, _) in zip(shapes, shapes[1:]):
            if fo_a != fi_b:
                raise ShapeError(f"layer widths do not chain: {shapes}")
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        expected = param_count(shapes)
        if values.size != expected:
            raise ShapeError(
                f"expected {expected} parameter values for shapes {shapes}, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise ValueError(f"non-finite parameter at index {bad}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layer_shapes", shapes)

    @property
    def input_dim(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def num_classes(self) -> int:
        return self.layer_shapes[-1][1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weights, bias) views per layer; weights shaped (fan_in, fan_out)."""
        out = []
        offset = 0
        for fi, fo in self.layer_shapes:
            w = self.values[offset:offset + fi * fo].reshape(fi, fo)
            offset += fi * fo
            b = self.values[offset:offset + fo]
            offset += fo
            out.append((w, b))
        return out


def zeros_like_values(params: ModelParams) -> np.ndarray:
    return np.zeros(params.values.size, dtype=np.float64)


def init_params(layer_dims: Sequence[int], rng: np.random.Generator) -> ModelParams:
    """He-style init: weights ~ N(0, 2/fan_in), biases zero.

    Draw order is one weight matrix per layer, first to last.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ShapeError("layer_dims needs at least input and output widths")
    chunks: list[np.ndarray] = []
    shapes: list[tuple[int, int]] = []
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fi), size=(fi, fo))
        chunks.append(w.ravel())
        chunks.append(np.zeros(fo))
        shapes.append((fi, fo))
    return ModelParams(np.concatenate(chunks), tuple(shapes))


@dataclass(frozen=True)
class Batch:
    """A design matrix with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ShapeError(f"batch inputs must be (n>=1, d), got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ShapeError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} rows"
            )
        if int(labels.min()) < 0:
            raise ValueError("negative class label")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass needs from one forward evaluation.

    ``features`` is the last hidden activation (for a single-layer model it
    is the input itself); feature-space regularizers differentiate through it.
    """

    inputs: np.ndarray
    pre_activations: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]
    logits: np.ndarray
    features: np.ndarray


def forward(params: ModelParams, batch: Batch) -> ForwardTrace:
    """ReLU hidden layers, linear output. Deterministic and float64 throughout."""
    if batch.inputs.shape[1] != params.input_dim:
        raise ShapeError(
            f"batch width {batch.inputs.shape[1]} does not match model input {params.input_dim}"
        )
    layers = params.layers()
    act = batch.inputs
    pres: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    for w, b in layers[:-1]:
        pre = act @ w + b
        act = np.maximum(pre, 0.0)
        pres.append(pre)
        acts.append(act)
    w, b = layers[-1]
    logits = act @ w + b
    pres.append(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    features = acts[-1] if acts else batch.inputs
    return ForwardTrace(batch.inputs, tuple(pres), tuple(acts), logits, features)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy per row via log-sum-exp, no overflow for large logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (int(labels.min()) < 0 or int(labels.max()) >= c):
        bad = int(labels[(labels < 0) | (labels >= c)][0])
        raise ValueError(f"label {bad} out of range for {c} classes")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(n), labels]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its logit gradient (softmax - onehot) / n."""
    losses = per_sample_loss(logits, labels)
    n = losses.shape[0]
    dlogits = softmax(np.asarray(logits, dtype=np.float64))
    dlogits[np.arange(n), np.asarray(labels, dtype=np.int64)] -= 1.0
    dlogits /= n
    return float(losses.mean()), dlogits


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    dlogits: np.ndarray,
    dfeatures: np.ndarray | None = None,
) -> np.ndarray:
    """Flat parameter gradient from a logit gradient.

    ``dfeatures``, when given, is an extra gradient with respect to the last
    hidden activation (the trace's ``features``) and is added where that
    activation feeds the output layer. For single-layer models the features
    are the constant inputs, so the extra term contributes nothing.
    """
    layers = params.layers()
    n_layers = len(layers)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape:
        raise ShapeError(f"dlogits shape {dlogits.shape} != logits {trace.logits.shape}")
    n = trace.inputs.shape[0]
    if len(trace.pre_activations) != n_layers or len(trace.activations) != n_layers - 1:
        raise ShapeError("trace does not match model depth")
    for (_, fo), pre in zip(params.layer_shapes, trace.pre_activations):
        if pre.shape != (n, fo):
            raise ShapeError(f"stale trace: pre-activation {pre.shape} != ({n}, {fo})")
    if trace.inputs.shape[1] != params.input_dim:
        raise ShapeError("stale trace: input width mismatch")
    if dfeatures is not None:
        dfeatures = np.asarray(dfeatures, dtype=np.float64)
        if dfeatures.shape != trace.features.shape:
            raise ShapeError(
                f"dfeatures shape {dfeatures.shape} != features {trace.features.shape}"
            )

    grads: list[np.ndarray] = [np.empty(0)] * n_layers
    d_pre = dlogits
    for i in range(n_layers - 1, -1, -1):
        a_prev = trace.activations[i - 1] if i > 0 else trace.inputs
        dw = a_prev.T @ d_pre
        db = d_pre.sum(axis=0)
        grads[i] = np.concatenate([dw.ravel(), db])
        if i == 0:
            break
        d_act = d_pre @ layers[i][0].T
        if i == n_layers - 1 and dfeatures is not None:
            d_act = d_act + dfeatures
        d_pre = d_act * (trace.pre_activations[i - 1] > 0.0)
    return np.concatenate(grads)


def sgd_step(params: ModelParams, gradient: np.ndarray, lr: float) -> ModelParams:
    """One step of plain SGD: values - lr * gradient."""
    g = np.asarray(gradient, dtype=np.float64).ravel()
    if g.size != params.values.size:
        raise ShapeError(f"gradient size {g.size} != parameter size {params.values.size}")
    if lr < 0.0:
        raise ValueError(f"negative learning rate {lr}")
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise ValueError(f"non-finite gradient at index {bad}")
    return ModelParams(params.values - lr * g, params.layer_shapes)
