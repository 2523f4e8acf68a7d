"""Diagnostics: linear CKA layer similarity, weight-divergence traces,
accuracy evaluation, and metrics persistence.

Metrics serialization is deterministic: floats are written at 9 significant
digits and per-round wall-clock stays in memory only (timing belongs in a
separate log so repeated runs produce byte-identical files).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ShapeError

CSV_FORMAT = "csv"
JSONL_FORMAT = "jsonl"

_FIXED_COLUMNS = ["round", "client_id", "test_accuracy", "e", "q", "flagged",
                  "corrected", "n_relabeled"]


# ------------------------------------------------------------------- CKA

def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two representation matrices sharing their rows.

    Columns are mean-centered; the score is ||Yc' Xc||_F^2 divided by
    ||Xc' Xc||_F * ||Yc' Yc||_F, which lands in [0, 1] with 1 for identical
    (up to orthogonal transform / isotropic scale) representations.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"need matching sample counts, got {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    x_norm = np.linalg.norm(xc.T @ xc)
    y_norm = np.linalg.norm(yc.T @ yc)
    if x_norm == 0.0 or y_norm == 0.0:
        raise ValueError("CKA is undefined for zero-variance representations")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (x_norm * y_norm))


@dataclass
class CkaReport:
    """Per-layer pairwise CKA across client models plus the global model.

    ``matrices[l]`` is (C+1)x(C+1), symmetric, unit diagonal; the global
    model occupies the last row/column. ``mean_noisy[l]`` / ``mean_clean[l]``
    average each group's similarity to the global model at layer l.
    """

    probe_id: str
    num_clients: int
    noisy_ids: list[int]
    matrices: list[np.ndarray]
    mean_noisy: list[float]
    mean_clean: list[float]

    @property
    def num_layers(self) -> int:
        return len(self.matrices)


def probe_fingerprint(probe: np.ndarray) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(probe).tobytes()).hexdigest()
    return f"n{probe.shape[0]}d{probe.shape[1]}-{digest[:12]}"


def cka_layer_report(client_models: list[nn.ModelParams],
                     global_model: nn.ModelParams, probe: np.ndarray,
                     noisy_ids) -> CkaReport:
    """Forward every model on a shared probe batch and compare layer features."""
    if len(client_models) < 1:
        raise ValueError("need at least one client model")
    models = list(client_models) + [global_model]
    feats = [nn.forward(m, probe)[0] for m in models]
    n_layers = global_model.num_layers
    n_models = len(models)
    noisy = sorted(int(c) for c in noisy_ids)
    clean = [c for c in range(len(client_models)) if c not in set(noisy)]

    matrices, mean_noisy, mean_clean = [], [], []
    for l in range(n_layers):
        mat = np.eye(n_models)
        for i in range(n_models):
            for j in range(i + 1, n_models):
                mat[i, j] = mat[j, i] = linear_cka(feats[i][l], feats[j][l])
        matrices.append(mat)
        g = n_models - 1
        mean_noisy.append(float(np.mean([mat[c, g] for c in noisy])) if noisy else math.nan)
        mean_clean.append(float(np.mean([mat[c, g] for c in clean])) if clean else math.nan)
    return CkaReport(probe_fingerprint(probe), len(client_models), noisy,
                     matrices, mean_noisy, mean_clean)


# ------------------------------------------------------------ accuracy etc.

def weight_divergence(global_params: nn.ModelParams,
                      clients: list[nn.ModelParams]) -> list[float]:
    """Per-client squared parameter distance to the global model."""
    return [nn.param_sq_distance(global_params, c) for c in clients]


def evaluate_accuracy(params: nn.ModelParams, test_set: LabeledDataset) -> float:
    """Fraction of argmax predictions matching the labels."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    preds, _ = nn.predict_confidences(params, test_set.features)
    return float((preds == test_set.labels).mean())


def mean_last_accuracy(metrics: list["RoundMetrics"], k: int = 10) -> float:
    """Arithmetic mean of the last k per-round test accuracies."""
    tail = metrics[-k:]
    if not tail:
        raise ValueError("no rounds recorded")
    return sum(m.test_accuracy for m in tail) / len(tail)


# ---------------------------------------------------------------- metrics

@dataclass
class RoundMetrics:
    """One round's record: accuracy, per-client diagnostics, layer weights.

    ``weights`` is the L x C aggregation weight matrix applied (or implied)
    this round. ``wall_clock`` is in-memory only and never serialized, so
    metric files stay byte-identical across reruns.
    """

    round_idx: int
    test_accuracy: float
    client_ids: list[int]
    divergence: list[float]          # e = ||theta_G - theta_c||^2
    reliability: list[float]         # q = e * h / n
    flagged: list[bool]
    corrected: list[bool]
    n_relabeled: list[int]
    weights: list[list[float]]       # L rows, C columns
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def num_layers(self) -> int:
        return len(self.weights)


def _f(x: float) -> str:
    return format(float(x), ".9g")


def write_metrics(metrics: list[RoundMetrics], path, fmt: str) -> None:
    """Persist metrics as CSV (one row per round x client) or JSONL (per round)."""
    if fmt == CSV_FORMAT:
        _write_csv(metrics, path)
    elif fmt == JSONL_FORMAT:
        _write_jsonl(metrics, path)
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def _write_csv(metrics: list[RoundMetrics], path) -> None:
    n_layers = metrics[0].num_layers if metrics else 0
    header = _FIXED_COLUMNS + [f"w_l{l}" for l in range(n_layers)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for m in metrics:
            for i, cid in enumerate(m.client_ids):
                row = [m.round_idx, cid, _f(m.test_accuracy), _f(m.divergence[i]),
                       _f(m.reliability[i]), int(m.flagged[i]), int(m.corrected[i]),
                       m.n_relabeled[i]]
                row += [_f(m.weights[l][i]) for l in range(n_layers)]
                writer.writerow(row)


def _write_jsonl(metrics: list[RoundMetrics], path) -> None:
    with open(path, "w") as fh:
        for m in metrics:
            record = {
                "round": m.round_idx,
                "test_accuracy": float(_f(m.test_accuracy)),
                "client_ids": m.client_ids,
                "e": [float(_f(v)) for v in m.divergence],
                "q": [float(_f(v)) for v in m.reliability],
                "flagged": [bool(v) for v in m.flagged],
                "corrected": [bool(v) for v in m.corrected],
                "n_relabeled": [int(v) for v in m.n_relabeled],
                "weights": [[float(_f(v)) for v in row] for row in m.weights],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_metrics(path, fmt: str) -> list[RoundMetrics]:
    """Parse files produced by :func:`write_metrics`."""
    if fmt == CSV_FORMAT:
        return _read_csv(path)
    if fmt == JSONL_FORMAT:
        return _read_jsonl(path)
    raise ValueError(f"unknown metrics format {fmt!r}")


def _read_csv(path) -> list[RoundMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_layers = len(header) - len(_FIXED_COLUMNS)
        by_round: dict[int, RoundMetrics] = {}
        for row in reader:
            r = int(row[0])
            m = by_round.get(r)
            if m is None:
                m = RoundMetrics(r, float(row[2]), [], [], [], [], [], [],
                                 [[] for _ in range(n_layers)])
                by_round[r] = m
            m.client_ids.append(int(row[1]))
            m.divergence.append(float(row[3]))
            m.reliability.append(float(row[4]))
            m.flagged.append(bool(int(row[5])))
            m.corrected.append(bool(int(row[6])))
            m.n_relabeled.append(int(row[7]))
            for l in range(n_layers):
                m.weights[l].append(float(row[8 + l]))
    return [by_round[r] for r in sorted(by_round)]


def _read_jsonl(path) -> list[RoundMetrics]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(RoundMetrics(
                rec["round"], rec["test_accuracy"], rec["client_ids"], rec["e"],
                rec["q"], rec["flagged"], rec["corrected"], rec["n_relabeled"],
                rec["weights"]))
    return out
