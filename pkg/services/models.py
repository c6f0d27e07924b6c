"""
Small differentiable models with closed-form cross-entropy loss and gradient.
Parameters live in one flat ParamVector; model_layout() says how it splits into tensors.
Also provides the central-difference gradient oracle used to check the analytic gradients.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from sklearn.metrics import accuracy_score

from services.errors import DimensionError, ModelInputError
from services.numvec import ParamVector, TensorLayout, check_dimension

KINDS = ("linear-softmax", "mlp-1hidden", "quadratic")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear-softmax"
    input_dim: int = 20
    num_classes: int = 10
    hidden_dim: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelInputError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ModelInputError("input_dim must be >= 1")
        if self.kind != "quadratic" and self.num_classes < 2:
            raise ModelInputError("num_classes must be >= 2")
        if self.kind == "mlp-1hidden":
            if self.hidden_dim < 1:
                raise ModelInputError("mlp-1hidden needs hidden_dim >= 1")
            if self.activation not in ACTIVATIONS:
                raise ModelInputError(f"unknown activation {self.activation!r}")

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2:
            raise ModelInputError(f"features must be a matrix, got shape {features.shape}")
        if features.shape[0] < 1:
            raise ModelInputError("batch needs at least one row")
        if labels.shape[0] != features.shape[0]:
            raise ModelInputError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if np.any(labels < 0):
            raise ModelInputError("labels must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    def take(self, indices) -> "Batch":
        return Batch(self.features[indices], self.labels[indices])


def model_layout(spec: ModelSpec) -> TensorLayout:
    """Tensor shapes in flat-vector order."""
    D, C, H = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "linear-softmax":
        return TensorLayout(shapes=((C, D), (C,)))
    if spec.kind == "mlp-1hidden":
        return TensorLayout(shapes=((H, D), (H,), (C, H), (C,)))
    return TensorLayout(shapes=((D,),))


def parameter_count(spec: ModelSpec) -> int:
    return model_layout(spec).size


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Zeros for linear/quadratic models; U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every MLP tensor."""
    layout = model_layout(spec)
    if spec.kind != "mlp-1hidden":
        return np.zeros(layout.size, dtype=np.float64)
    fan_ins = (spec.input_dim, spec.input_dim, spec.hidden_dim, spec.hidden_dim)
    parts = []
    for shape, fan_in in zip(layout.shapes, fan_ins):
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=shape))
    return layout.join(parts)


def _check_inputs(spec: ModelSpec, w: ParamVector, batch: Batch) -> None:
    check_dimension(w, parameter_count(spec), "parameter vector")
    if batch.features.shape[1] != spec.input_dim:
        raise DimensionError(f"batch has {batch.features.shape[1]} features, model expects {spec.input_dim}")
    if not np.all(np.isfinite(batch.features)):
        raise ModelInputError("batch contains non-finite features")
    if spec.is_classifier and np.any(batch.labels >= spec.num_classes):
        raise ModelInputError(f"label out of range for {spec.num_classes} classes")


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_norm = np.log(sum_exp)
    rows = np.arange(n)
    loss = float(np.mean(log_norm[:, 0] - shifted[rows, labels]))
    probs = exp / sum_exp
    probs[rows, labels] -= 1.0
    return loss, probs / n


def _logits(spec: ModelSpec, w: ParamVector, X: np.ndarray):
    layout = model_layout(spec)
    if spec.kind == "linear-softmax":
        W, b = layout.split(w)
        return X @ W.T + b, None
    W1, b1, W2, b2 = layout.split(w)
    pre = X @ W1.T + b1
    hidden = np.tanh(pre) if spec.activation == "tanh" else np.maximum(pre, 0.0)
    return hidden @ W2.T + b2, (pre, hidden)


def loss_value(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    _check_inputs(spec, w, batch)
    if spec.kind == "quadratic":
        diff = w[None, :] - batch.features
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))
    logits, _ = _logits(spec, w, batch.features)
    loss, _ = _softmax_xent(logits, batch.labels)
    return loss


def loss_and_grad(spec: ModelSpec, w: ParamVector, batch: Batch) -> Tuple[float, ParamVector]:
    """Mean loss over the batch and its exact gradient."""
    _check_inputs(spec, w, batch)
    X = batch.features
    if spec.kind == "quadratic":
        diff = w[None, :] - X
        loss = float(0.5 * np.mean(np.sum(diff * diff, axis=1)))
        return loss, np.mean(diff, axis=0)

    layout = model_layout(spec)
    logits, cache = _logits(spec, w, X)
    loss, d_logits = _softmax_xent(logits, batch.labels)
    if spec.kind == "linear-softmax":
        return loss, layout.join([d_logits.T @ X, d_logits.sum(axis=0)])

    pre, hidden = cache
    _, _, W2, _ = layout.split(w)
    g_W2 = d_logits.T @ hidden
    g_b2 = d_logits.sum(axis=0)
    d_hidden = d_logits @ W2
    if spec.activation == "tanh":
        d_pre = d_hidden * (1.0 - hidden * hidden)
    else:
        # relu'(0) = 0
        d_pre = d_hidden * (pre > 0.0)
    g_W1 = d_pre.T @ X
    g_b1 = d_pre.sum(axis=0)
    return loss, layout.join([g_W1, g_b1, g_W2, g_b2])


def finite_diff_grad(spec: ModelSpec, w: ParamVector, batch: Batch, h: float = 1e-6) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    _check_inputs(spec, w, batch)
    grad = np.empty_like(w)
    shifted = w.copy()
    for k in range(w.shape[0]):
        orig = shifted[k]
        shifted[k] = orig + h
        up = loss_value(spec, shifted, batch)
        shifted[k] = orig - h
        down = loss_value(spec, shifted, batch)
        shifted[k] = orig
        grad[k] = (up - down) / (2.0 * h)
    return grad


def predict(spec: ModelSpec, w: ParamVector, batch: Batch) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    _check_inputs(spec, w, batch)
    logits, _ = _logits(spec, w, batch.features)
    return np.argmax(logits, axis=1)


def predict_accuracy(spec: ModelSpec, w: ParamVector, batch: Batch) -> float:
    if batch.size == 0:
        raise ModelInputError("accuracy of an empty batch is undefined")
    if not spec.is_classifier:
        _check_inputs(spec, w, batch)
        return 0.0
    return float(accuracy_score(batch.labels, predict(spec, w, batch)))
