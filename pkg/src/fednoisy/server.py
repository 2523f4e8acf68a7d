"""Round orchestration and the four aggregators.

Detection identifies noisy clients from the distribution of reliability
scores (model divergence times normalized data-quality loss); the
noise-robust aggregator then builds a separate weight row per layer that
penalizes flagged clients, and after a warm-up horizon the persistently
flagged clients get their labels corrected by the global model.

The penalty enters as a divisor on a client's base score (w ∝ N/(m·d)), so a
flagged client's influence shrinks by up to the cap; ``penalty_mode`` can be
switched to the multiplicative form for comparison.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .analysis import RoundMetrics, evaluate_accuracy, weight_divergence
from .client import (TRAIN_RELABELED_ONLY, ClientConfig, ClientUpdate,
                     apply_label_correction, correction_mask, local_train)
from .data import (ClientAssignment, LabeledDataset, NoiseSpec, PartitionSpec,
                   apply_symmetric_noise, make_partitions,
                   sample_client_noise_rates)
from .errors import ShapeError

FEDAVG = "fedavg"
TRIMMED_MEAN = "trimmed_mean"
FEDPROX = "fedprox"
FED_NCL = "fed_ncl"
AGGREGATORS = (FEDAVG, TRIMMED_MEAN, FEDPROX, FED_NCL)

PENALTY_DIVISOR = "divisor"
PENALTY_LITERAL = "literal"

ROW_SUM_TOL = 1e-9


@dataclass
class ServerConfig:
    """Aggregation and detection hyperparameters (defaults per the protocol)."""

    aggregator: str = FED_NCL
    trim_pct: float = 10.0     # per-side trim percentage for trimmed mean
    beta: float = 0.6          # detection threshold in std units
    tau: float = 50.0          # penalty cap
    t_k: int = 10              # rounds until the penalty ramps to tau
    alpha: float = 0.6         # correction quorum fraction
    t_corr: int = 60           # round at which label correction triggers
    eta: float = 0.8           # relabeling confidence threshold
    rounds: int = 150
    num_clients: int = 20
    penalty_mode: str = PENALTY_DIVISOR
    unweighted: bool = False   # 1/C averaging instead of size-weighted


@dataclass
class ReliabilityScores:
    """Per-client q values for one round plus their population statistics."""

    round_idx: int
    client_ids: list[int]
    q: np.ndarray
    divergence: np.ndarray     # e per client, kept for diagnostics
    mean: float
    std: float


@dataclass
class DetectionHistory:
    """Per-round flag sets and cumulative per-client flag counts."""

    flagged: list[set[int]] = field(default_factory=list)
    clean: list[set[int]] = field(default_factory=list)
    counts: dict[int, int] = field(default_factory=dict)

    def record(self, noisy: set[int], clean: set[int]) -> None:
        self.flagged.append(set(noisy))
        self.clean.append(set(clean))
        for c in noisy:
            self.counts[c] = self.counts.get(c, 0) + 1

    @property
    def num_rounds(self) -> int:
        return len(self.flagged)


# -------------------------------------------------------------- aggregators

def _combine(updates: list[ClientUpdate], weights: np.ndarray) -> nn.ModelParams:
    first = updates[0].params
    out_w = [np.zeros_like(w) for w in first.weights]
    out_b = [np.zeros_like(b) for b in first.biases]
    for u, wgt in zip(updates, weights):
        for l in range(first.num_layers):
            out_w[l] += wgt * u.params.weights[l]
            out_b[l] += wgt * u.params.biases[l]
    return nn.ModelParams(out_w, out_b, list(first.activations))


def fedavg_weights(updates: list[ClientUpdate], unweighted: bool) -> np.ndarray:
    if unweighted:
        return np.full(len(updates), 1.0 / len(updates))
    sizes = np.array([u.n_samples for u in updates], dtype=np.float64)
    return sizes / sizes.sum()


def aggregate_fedavg(updates: list[ClientUpdate],
                     unweighted: bool = False) -> nn.ModelParams:
    """Coordinate-wise mean, weighted by sample counts unless ``unweighted``."""
    if not updates:
        raise ValueError("no updates to aggregate")
    return _combine(updates, fedavg_weights(updates, unweighted))


def aggregate_trimmed_mean(updates: list[ClientUpdate],
                           trim_pct: float) -> nn.ModelParams:
    """Per coordinate: sort client values, drop trim_pct% per side, average."""
    if not updates:
        raise ValueError("no updates to aggregate")
    if not 0 <= trim_pct < 50:
        raise ValueError("trim_pct must be in [0, 50)")
    c = len(updates)
    m = int(np.floor(trim_pct / 100.0 * c))
    if 2 * m >= c:
        raise ValueError(f"trimming {m} per side leaves no clients out of {c}")
    first = updates[0].params
    out_w, out_b = [], []
    for l in range(first.num_layers):
        stack_w = np.sort(np.stack([u.params.weights[l] for u in updates]), axis=0)
        stack_b = np.sort(np.stack([u.params.biases[l] for u in updates]), axis=0)
        out_w.append(stack_w[m:c - m].mean(axis=0))
        out_b.append(stack_b[m:c - m].mean(axis=0))
    return nn.ModelParams(out_w, out_b, list(first.activations))


# ---------------------------------------------------------------- detection

def reliability_scores(updates: list[ClientUpdate],
                       global_params: nn.ModelParams) -> ReliabilityScores:
    """q_c = ||theta_G - theta_c||^2 * h_c / n_c, with population mean/std."""
    if not updates:
        raise ValueError("no updates to score")
    if any(u.n_samples <= 0 for u in updates):
        raise ValueError("updates must carry positive sample counts")
    e = np.array(weight_divergence(global_params, [u.params for u in updates]))
    h_per_sample = np.array([u.h / u.n_samples for u in updates])
    q = e * h_per_sample
    return ReliabilityScores(
        updates[0].round_idx, [u.client_id for u in updates], q, e,
        float(q.mean()), float(q.std()))


def detect_noisy(scores: ReliabilityScores,
                 beta: float) -> tuple[set[int], set[int]]:
    """Flag clients whose q exceeds the mean by more than beta std-devs.

    One-sided: only high scores flag. With identical scores (or one client)
    the deviation is exactly zero, so nothing flags.
    """
    q = scores.q
    ids = scores.client_ids
    if q.size < 2 or np.ptp(q) == 0.0:
        return set(), set(ids)
    noisy = {cid for cid, v in zip(ids, q) if v - scores.mean > beta * scores.std}
    return noisy, set(ids) - noisy


def select_s_corr(history: DetectionHistory, alpha: float,
                  t_corr: int) -> set[int]:
    """Clients flagged in strictly more than alpha * t_corr of the first
    t_corr rounds."""
    if history.num_rounds < t_corr:
        raise ValueError(
            f"history covers {history.num_rounds} rounds, need {t_corr}")
    counts: dict[int, int] = {}
    for flagged in history.flagged[:t_corr]:
        for c in flagged:
            counts[c] = counts.get(c, 0) + 1
    return {c for c, n in counts.items() if n > alpha * t_corr}


def penalty_m(client_id: int, round_idx: int, flagged_now: set[int],
              tau: float, t_k: int) -> float:
    """Time-ramped penalty factor: 1 for clean clients, min(T/T_k * tau, tau)
    for flagged ones."""
    if round_idx < 1:
        raise ValueError("rounds are 1-based")
    if client_id not in flagged_now:
        return 1.0
    return min(round_idx / t_k * tau, tau)


# ------------------------------------------------------ layer-wise weighting

def layerwise_weights(updates: list[ClientUpdate],
                      global_params: nn.ModelParams, flagged_now: set[int],
                      round_idx: int, config: ServerConfig) -> np.ndarray:
    """L x C weight matrix: per layer, normalize N^c scores discounted by the
    layer distance d = 1 + ||theta_l^G - theta_l^c||^2 and the penalty.

    ``divisor`` mode computes w ∝ N/(m·d) so flagged clients shrink;
    ``literal`` mode computes w ∝ m·N/d (the multiplicative reading).
    """
    n_layers = global_params.num_layers
    sizes = np.array([u.n_samples for u in updates], dtype=np.float64)
    penalties = np.array([
        penalty_m(u.client_id, round_idx, flagged_now, config.tau, config.t_k)
        for u in updates])
    w = np.zeros((n_layers, len(updates)))
    for l in range(n_layers):
        d = np.array([1.0 + nn.layer_sq_distance(global_params, u.params, l)
                      for u in updates])
        base = sizes / d
        if config.penalty_mode == PENALTY_DIVISOR:
            score = base / penalties
        elif config.penalty_mode == PENALTY_LITERAL:
            score = base * penalties
        else:
            raise ValueError(f"unknown penalty mode {config.penalty_mode!r}")
        w[l] = score / score.sum()
    return w


def aggregate_layerwise(updates: list[ClientUpdate],
                        weights: np.ndarray) -> nn.ModelParams:
    """Build each global layer as its own weighted average over clients."""
    if not updates:
        raise ValueError("no updates to aggregate")
    first = updates[0].params
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (first.num_layers, len(updates)):
        raise ShapeError(
            f"weight matrix {weights.shape} does not match "
            f"{first.num_layers} layers x {len(updates)} clients")
    if np.abs(weights.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
        raise ValueError("every layer row must sum to 1")
    out_w = [np.zeros_like(w) for w in first.weights]
    out_b = [np.zeros_like(b) for b in first.biases]
    for ci, u in enumerate(updates):
        for l in range(first.num_layers):
            out_w[l] += weights[l, ci] * u.params.weights[l]
            out_b[l] += weights[l, ci] * u.params.biases[l]
    return nn.ModelParams(out_w, out_b, list(first.activations))


# ---------------------------------------------------------------- experiment

class Experiment:
    """Owns the global model, client assignments, and detection history.

    Construction partitions the dataset, samples per-client noise rates from
    the noise spec, and injects label flips; ``run`` then executes the
    configured number of rounds. Everything derives from the master seed, so
    identical configurations reproduce bit-identical metric streams at any
    worker count.
    """

    def __init__(self, dataset: LabeledDataset, test_set: LabeledDataset, *,
                 partition: PartitionSpec, noise: NoiseSpec,
                 client_config: ClientConfig, server_config: ServerConfig,
                 hidden_dims=(64, 32), seed: int = 0, workers: int = 1,
                 round_hook=None):
        if server_config.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {server_config.aggregator!r}")
        self.round_hook = round_hook  # called with (round_idx, updates, new_global)
        self.dataset = dataset
        self.test_set = test_set
        self.client_config = client_config
        self.config = server_config
        self.seed = seed
        self.workers = max(1, workers)

        c = server_config.num_clients
        part = PartitionSpec(partition.kind, c, seed, partition.p_class,
                             partition.alpha_dir, partition.sigma_log)
        assignments = make_partitions(dataset, part)
        self.noise_rates = sample_client_noise_rates(noise, c, (seed, 1))
        self.assignments = [
            apply_symmetric_noise(a, float(rate), dataset.num_classes,
                                  (seed, 2, a.client_id))
            for a, rate in zip(assignments, self.noise_rates)]

        sizes = [dataset.dim, *hidden_dims, dataset.num_classes]
        self.global_params = nn.init_params(nn.mlp_specs(sizes), (seed, 0))
        self.history = DetectionHistory()
        self.s_corr: set[int] = set()
        self.metrics: list[RoundMetrics] = []

    # -- round pieces ------------------------------------------------------

    def _train_clients(self, round_idx: int) -> list[ClientUpdate]:
        def work(assignment: ClientAssignment) -> ClientUpdate:
            return local_train(self.global_params, assignment, self.dataset,
                               self.client_config, round_idx, self.seed)

        if self.workers == 1:
            return [work(a) for a in self.assignments]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(work, self.assignments))

    def _aggregate(self, updates: list[ClientUpdate],
                   flagged: set[int], round_idx: int
                   ) -> tuple[nn.ModelParams, np.ndarray]:
        cfg = self.config
        n_layers = self.global_params.num_layers
        if cfg.aggregator == FED_NCL:
            w = layerwise_weights(updates, self.global_params, flagged,
                                  round_idx, cfg)
            return aggregate_layerwise(updates, w), w
        if cfg.aggregator in (FEDAVG, FEDPROX):
            row = fedavg_weights(updates, cfg.unweighted)
            return aggregate_fedavg(updates, cfg.unweighted), \
                np.tile(row, (n_layers, 1))
        # trimmed mean has no per-client weights; record the nominal 1/C rows
        row = np.full(len(updates), 1.0 / len(updates))
        return aggregate_trimmed_mean(updates, cfg.trim_pct), \
            np.tile(row, (n_layers, 1))

    def _correct_labels(self, new_global: nn.ModelParams
                        ) -> tuple[set[int], dict[int, int]]:
        cfg = self.config
        self.s_corr = select_s_corr(self.history, cfg.alpha, cfg.t_corr)
        relabeled: dict[int, int] = {}
        for cid in sorted(self.s_corr):
            assignment = self.assignments[cid]
            corrected, n_rel = apply_label_correction(
                assignment, new_global, self.dataset, cfg.eta)
            if self.client_config.train_on == TRAIN_RELABELED_ONLY:
                _, mask = correction_mask(assignment, new_global, self.dataset,
                                          cfg.eta)
                if mask.any():  # a client must keep at least one sample
                    corrected = ClientAssignment(
                        cid, corrected.indices[mask],
                        corrected.true_labels[mask],
                        corrected.noisy_labels[mask], corrected.noise_rate)
            self.assignments[cid] = corrected
            relabeled[cid] = n_rel
        return self.s_corr, relabeled

    def run_round(self, round_idx: int) -> tuple[nn.ModelParams, RoundMetrics]:
        """One full round: train, score, detect, aggregate, maybe correct."""
        t0 = time.perf_counter()
        cfg = self.config
        updates = self._train_clients(round_idx)
        scores = reliability_scores(updates, self.global_params)
        noisy, clean = detect_noisy(scores, cfg.beta)
        self.history.record(noisy, clean)

        new_global, weight_matrix = self._aggregate(updates, noisy, round_idx)

        corrected_ids: set[int] = set()
        relabeled: dict[int, int] = {}
        if cfg.aggregator == FED_NCL and round_idx == cfg.t_corr:
            corrected_ids, relabeled = self._correct_labels(new_global)

        if self.round_hook is not None:
            self.round_hook(round_idx, updates, new_global)

        metrics = RoundMetrics(
            round_idx=round_idx,
            test_accuracy=evaluate_accuracy(new_global, self.test_set),
            client_ids=[u.client_id for u in updates],
            divergence=[float(v) for v in scores.divergence],
            reliability=[float(v) for v in scores.q],
            flagged=[u.client_id in noisy for u in updates],
            corrected=[u.client_id in corrected_ids for u in updates],
            n_relabeled=[relabeled.get(u.client_id, 0) for u in updates],
            weights=[[float(v) for v in row] for row in weight_matrix],
            wall_clock=time.perf_counter() - t0)
        self.global_params = new_global
        self.metrics.append(metrics)
        return new_global, metrics

    def run(self) -> list[RoundMetrics]:
        for round_idx in range(1, self.config.rounds + 1):
            self.run_round(round_idx)
        return self.metrics


def run_experiment(dataset: LabeledDataset, test_set: LabeledDataset, *,
                   partition: PartitionSpec, noise: NoiseSpec,
                   client_config: ClientConfig, server_config: ServerConfig,
                   hidden_dims=(64, 32), seed: int = 0,
                   workers: int = 1) -> list[RoundMetrics]:
    """Build an experiment, run all rounds, and return the metric stream."""
    return Experiment(dataset, test_set, partition=partition, noise=noise,
                      client_config=client_config, server_config=server_config,
                      hidden_dims=hidden_dims, seed=seed, workers=workers).run()


def detection_precision_recall(flagged: set[int],
                               noise_rates) -> tuple[float, float]:
    """Precision/recall of a flag set against ground-truth rates (> 0 = noisy).

    Empty denominators count as perfect (nothing to get wrong).
    """
    truly_noisy = {c for c, r in enumerate(np.asarray(noise_rates)) if r > 0}
    if flagged:
        precision = len(flagged & truly_noisy) / len(flagged)
    else:
        precision = 1.0
    if truly_noisy:
        recall = len(flagged & truly_noisy) / len(truly_noisy)
    else:
        recall = 1.0
    return precision, recall
