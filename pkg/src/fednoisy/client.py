"""Simulated client: local SGD (optionally proximal), data-quality loss,
and label-correction application.

A client never mutates the global parameters it receives; any number of
clients may train concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .data import ClientAssignment, LabeledDataset
from .errors import NumericError

H_ON_GLOBAL = "global"
H_ON_LOCAL = "local"
TRAIN_CORRECTED_ALL = "corrected_all"
TRAIN_RELABELED_ONLY = "relabeled_only"


@dataclass
class ClientConfig:
    """Local-training knobs.

    ``prox_mu`` > 0 adds the proximal pull toward the received global model
    (FedProx); ``h_on`` picks which parameters evaluate the data-quality
    loss: the received global model (default) or the freshly trained local
    one.
    """

    lr: float = 0.01
    local_epochs: int = 10
    batch_size: int = 60
    prox_mu: float = 0.0
    h_on: str = H_ON_GLOBAL
    train_on: str = TRAIN_CORRECTED_ALL


@dataclass
class ClientUpdate:
    """One client's round output."""

    client_id: int
    params: nn.ModelParams
    h: float              # summed cross-entropy of local (feature, label) pairs
    n_samples: int
    round_idx: int


def data_quality_loss(eval_params: nn.ModelParams, assignment: ClientAssignment,
                      dataset: LabeledDataset) -> float:
    """Summed cross-entropy of the client's training pairs under eval_params.

    The caller normalizes by the sample count inside the reliability score.
    """
    if len(assignment) == 0:
        raise ValueError("assignment is empty")
    x = dataset.features[assignment.indices]
    mean_loss, _ = nn.loss_and_grad(eval_params, x, assignment.noisy_labels)
    return mean_loss * len(assignment)


def local_train(global_params: nn.ModelParams, assignment: ClientAssignment,
                dataset: LabeledDataset, config: ClientConfig, round_idx: int,
                seed: int) -> ClientUpdate:
    """Mini-batch SGD on the client's (features, noisy_labels) shard.

    Deterministic given (seed, client_id, round_idx); the incoming global
    parameters are copied, never mutated.
    """
    n = len(assignment)
    if n == 0:
        raise ValueError(f"client {assignment.client_id} has no samples")
    rng = np.random.default_rng((seed, assignment.client_id, round_idx))
    x = dataset.features[assignment.indices]
    y = assignment.noisy_labels

    params = global_params.copy()
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            chunk = order[start:start + config.batch_size]
            _, grad = nn.loss_and_grad(params, x[chunk], y[chunk])
            if config.prox_mu > 0:
                for l in range(params.num_layers):
                    grad.weights[l] += config.prox_mu * (
                        params.weights[l] - global_params.weights[l])
                    grad.biases[l] += config.prox_mu * (
                        params.biases[l] - global_params.biases[l])
            params = nn.sgd_step(params, grad, config.lr)

    if not params.all_finite():
        raise NumericError(
            f"client {assignment.client_id} diverged to non-finite parameters")

    h_params = global_params if config.h_on == H_ON_GLOBAL else params
    h = data_quality_loss(h_params, assignment, dataset)
    return ClientUpdate(assignment.client_id, params, h, n, round_idx)


def correction_mask(assignment: ClientAssignment, global_params: nn.ModelParams,
                    dataset: LabeledDataset,
                    eta: float) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, confidence > eta mask) for the client's samples."""
    predicted, conf = nn.predict_confidences(
        global_params, dataset.features[assignment.indices])
    return predicted, conf > eta


def apply_label_correction(assignment: ClientAssignment,
                           global_params: nn.ModelParams,
                           dataset: LabeledDataset,
                           eta: float) -> tuple[ClientAssignment, int]:
    """Relabel samples whose global-model confidence strictly exceeds eta.

    Features and true_labels are untouched; idempotent for fixed
    global_params. Returns the corrected assignment and the relabel count.
    """
    if not 0 <= eta <= 1:
        raise ValueError("eta must be in [0, 1]")
    predicted, mask = correction_mask(assignment, global_params, dataset, eta)
    noisy = np.where(mask, predicted, assignment.noisy_labels).astype(np.int64)
    return replace(assignment, noisy_labels=noisy), int(mask.sum())
