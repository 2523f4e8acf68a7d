"""Minimal dense neural-network engine.

Parameter containers, forward/backward pass, SGD step, and the
parameter-distance primitives used by the aggregation and detection code.
Everything is plain float64 numpy; all functions are pure (inputs are never
mutated) so they are safe to call from concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: ``in_dim -> out_dim`` followed by an activation."""

    in_dim: int
    out_dim: int
    activation: str = RELU

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_specs(layer_sizes: list[int] | tuple[int, ...]) -> list[LayerSpec]:
    """Build the spec chain for an MLP, relu on hidden layers, identity logits.

    ``layer_sizes`` includes input and output dims, e.g. (784, 64, 32, 10).
    """
    if len(layer_sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    specs = []
    for k in range(len(layer_sizes) - 1):
        last = k == len(layer_sizes) - 2
        specs.append(LayerSpec(layer_sizes[k], layer_sizes[k + 1],
                               IDENTITY if last else RELU))
    return specs


@dataclass
class ModelParams:
    """Ordered per-layer parameter blocks of a dense classifier.

    ``weights[l]`` has shape (out_dim, in_dim), ``biases[l]`` shape (out_dim,).
    The unit exchanged between clients and server.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases],
                           list(self.activations))

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and \
            all(np.isfinite(b).all() for b in self.biases)


@dataclass
class Gradient:
    """Same per-layer structure as :class:`ModelParams`."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


def _check_congruent(a: ModelParams, b: ModelParams | Gradient) -> None:
    if len(a.weights) != len(b.weights):
        raise ShapeError(f"layer counts differ: {len(a.weights)} vs {len(b.weights)}")
    for l, (wa, wb) in enumerate(zip(a.weights, b.weights)):
        if wa.shape != wb.shape or a.biases[l].shape != b.biases[l].shape:
            raise ShapeError(f"layer {l} shapes differ: {wa.shape} vs {wb.shape}")


def init_params(specs: list[LayerSpec], seed: int) -> ModelParams:
    """Scaled-Gaussian (He) initialization: std = sqrt(2/in_dim), zero biases.

    Deterministic for a given seed.
    """
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_dim != cur.in_dim:
            raise ShapeError(
                f"layer chain broken: {prev.out_dim} -> {cur.in_dim}")
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    for spec in specs:
        std = np.sqrt(2.0 / spec.in_dim)
        weights.append(rng.normal(0.0, std, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
        acts.append(spec.activation)
    return ModelParams(weights, biases, acts)


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == RELU:
        return np.maximum(z, 0.0)
    return z


def forward(params: ModelParams, batch: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the network on a batch of rows.

    Returns (activations, logits) where activations[l] is the post-activation
    output of layer l; the final entry equals the logits (identity layer).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ShapeError(
            f"batch width {batch.shape} incompatible with input dim {params.in_dim}")
    activations = []
    a = batch
    for w, b, act in zip(params.weights, params.biases, params.activations):
        a = _apply_activation(a @ w.T + b, act)
        activations.append(a)
    logits = activations[-1]
    if not np.isfinite(logits).all():
        raise NumericError("forward pass produced non-finite logits")
    return activations, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Max-subtraction keeps exp() in range for extreme logits.
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(params: ModelParams, batch_x: np.ndarray,
                  labels: np.ndarray) -> tuple[float, Gradient]:
    """Mean softmax cross-entropy and its exact backprop gradient."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("batch is empty")
    activations, logits = forward(params, batch_x)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    log_probs = _log_softmax(logits)
    mean_loss = float(-log_probs[np.arange(n), labels].mean())

    probs = np.exp(log_probs)
    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    batch_x = np.asarray(batch_x, dtype=np.float64)
    grad_w: list[np.ndarray] = [None] * params.num_layers
    grad_b: list[np.ndarray] = [None] * params.num_layers
    for l in range(params.num_layers - 1, -1, -1):
        below = batch_x if l == 0 else activations[l - 1]
        grad_w[l] = delta.T @ below
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ params.weights[l]
            if params.activations[l - 1] == RELU:
                delta = delta * (activations[l - 1] > 0)
    return mean_loss, Gradient(grad_w, grad_b)


def sgd_step(params: ModelParams, grad: Gradient, lr: float) -> ModelParams:
    """One gradient-descent step: p' = p - lr * g, per coordinate."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    _check_congruent(params, grad)
    return ModelParams(
        [w - lr * g for w, g in zip(params.weights, grad.weights)],
        [b - lr * g for b, g in zip(params.biases, grad.biases)],
        list(params.activations))


def param_sq_distance(a: ModelParams, b: ModelParams) -> float:
    """Squared Euclidean distance over every coordinate of the two models."""
    _check_congruent(a, b)
    total = 0.0
    for l in range(a.num_layers):
        total += float(((a.weights[l] - b.weights[l]) ** 2).sum())
        total += float(((a.biases[l] - b.biases[l]) ** 2).sum())
    return total


def layer_sq_distance(a: ModelParams, b: ModelParams, layer: int) -> float:
    """Squared distance restricted to one layer's weight+bias block.

    Layers are indexed 0..L-1; summed over all layers this equals
    param_sq_distance.
    """
    _check_congruent(a, b)
    if not 0 <= layer < a.num_layers:
        raise ValueError(f"layer index {layer} outside [0, {a.num_layers})")
    return float(((a.weights[layer] - b.weights[layer]) ** 2).sum()
                 + ((a.biases[layer] - b.biases[layer]) ** 2).sum())


def predict_confidences(params: ModelParams,
                        batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (argmax label, max softmax probability).

    Ties break to the lowest class index.
    """
    _, logits = forward(params, batch)
    probs = softmax(logits)
    labels = probs.argmax(axis=1)
    return labels, probs[np.arange(probs.shape[0]), labels]
