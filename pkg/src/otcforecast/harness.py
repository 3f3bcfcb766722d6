"""Training loops, thresholded evaluation, and the granularity experiment.

Training is mini-batch Adam on the mean-squared error over all T_out x 2V
output cells, with a seeded shuffle per epoch.  Evaluation thresholds the
predicted probabilities and pools confusion counts over every
(sample, day, bond, side) decision; precision, recall and F1 are
micro-averaged from those pooled counts.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tensor
from .clustering import ClusterAssignment
from .errors import ContractError, NumericError
from .market import Sample
from .models import TRANSFORMER_KINDS, ModelConfig, build_model
from .seeding import rng_for

GRANULARITIES = ("individual", "cluster", "single")


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.01
    threshold: float = 0.5
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"threshold {self.threshold} outside (0, 1)")


@dataclass
class EvalReport:
    model_kind: str
    granularity: str
    cluster: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    per_cluster: dict[int, "EvalReport"] | None = None

    @classmethod
    def from_counts(cls, model_kind, granularity, cluster, tp, fp, fn, tn) -> "EvalReport":
        precision, recall, f1 = micro_prf(tp, fp, fn)
        return cls(model_kind, granularity, cluster, tp, fp, fn, tn, precision, recall, f1)


@dataclass
class LayerStats:
    """Mean and population variance of each layer's post-residual output."""

    model_kind: str
    tag: str
    stats: dict[str, tuple[float, float]]


def micro_prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Micro-averaged precision/recall/F1 with the zero-denominator-is-zero rule."""
    if min(tp, fp, fn) < 0:
        raise ContractError("confusion counts must be nonnegative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def train(model, train_samples: list[Sample], spec: TrainSpec) -> tuple[object, list[float]]:
    """Mini-batch Adam training; returns the model's params and per-epoch loss.

    The per-epoch value is the mean per-sample loss seen during that epoch.
    Gradients average over the batch; a non-finite loss aborts with
    NumericError.  Optional early stop when the epoch loss has not improved
    by at least 0.1% (relative) for ``patience`` consecutive epochs.
    """
    if not train_samples:
        raise ContractError("train() needs a nonempty training set")
    params = model.params.tensors()
    state = OptimizerState(learning_rate=spec.learning_rate)
    losses: list[float] = []
    best = math.inf
    stale = 0
    n = len(train_samples)
    for epoch in range(spec.epochs):
        order = rng_for(spec.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, spec.batch_size):
            batch = order[lo:lo + spec.batch_size]
            ad.zero_grads(params)
            batch_loss = 0.0
            for idx in batch:
                sample = train_samples[int(idx)]
                ad.reset_tape()
                pred = model.forward(sample.input_days, teacher=sample.target_days)
                loss = ad.mse_loss(pred, Tensor(np.asarray(sample.target_days, dtype=np.float64)))
                ad.backward(ad.scale(loss, 1.0 / len(batch)))
                batch_loss += loss.item()
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss in epoch {epoch}")
            ad.adam_step(params, [p.grad for p in params], state)
            epoch_loss += batch_loss
        ad.reset_tape()
        epoch_loss /= n
        losses.append(epoch_loss)
        if spec.patience is not None:
            if epoch_loss < best * (1.0 - 1e-3):
                best = epoch_loss
                stale = 0
            else:
                stale += 1
                if stale >= spec.patience:
                    break
    return model.params, losses


def initial_loss(model, samples: list[Sample]) -> float:
    """Mean per-sample MSE of the untrained model (diagnostic helper)."""
    total = 0.0
    with ad.no_grad():
        for s in samples:
            pred = model.forward(s.input_days, teacher=s.target_days)
            diff = pred.values - np.asarray(s.target_days, dtype=np.float64)
            total += float((diff * diff).mean())
    return total / len(samples)


def _confusion(pred_binary: np.ndarray, target: np.ndarray) -> tuple[int, int, int, int]:
    p = pred_binary.astype(bool)
    t = target.astype(bool)
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    tn = int((~p & ~t).sum())
    return tp, fp, fn, tn


def evaluate(
    model,
    test_samples: list[Sample],
    threshold: float,
    mode: str = "per_day",
    cluster_of: dict[str, int] | None = None,
    granularity: str = "single",
    cluster_tag: str = "all",
) -> EvalReport:
    """Threshold predictions and micro-average over all decision cells.

    ``per_day`` scores every output day; ``union`` collapses predictions
    and targets over the window by elementwise max before scoring.  With
    ``cluster_of`` the report also carries per-cluster sub-reports.
    """
    if not test_samples:
        raise ContractError("evaluate() needs a nonempty test set")
    if mode not in ("per_day", "union"):
        raise ContractError(f"unknown evaluation mode {mode!r}")
    kind = model.config.kind
    totals = np.zeros(4, dtype=np.int64)
    by_cluster: dict[int, np.ndarray] = {}
    for s in test_samples:
        probs = model.predict(s.input_days)
        if mode == "union":
            pred = probs.max(axis=0) >= threshold
            target = s.target_union
        else:
            pred = probs >= threshold
            target = s.target_days
        counts = np.array(_confusion(pred, target), dtype=np.int64)
        totals += counts
        if cluster_of is not None:
            if s.dealer_id not in cluster_of:
                raise ContractError(f"dealer {s.dealer_id} missing from cluster assignment")
            label = cluster_of[s.dealer_id]
            by_cluster.setdefault(label, np.zeros(4, dtype=np.int64))
            by_cluster[label] += counts
    report = EvalReport.from_counts(kind, granularity, cluster_tag, *totals.tolist())
    if cluster_of is not None:
        report.per_cluster = {
            label: EvalReport.from_counts(kind, granularity, str(label), *by_cluster[label].tolist())
            for label in sorted(by_cluster)
        }
    return report


def layer_signal_stats(model, probe_samples: list[Sample], tag: str = "") -> LayerStats:
    """Per-layer mean/variance of post-residual activations on a probe batch.

    Runs teacher-forced forwards so encoder and decoder layers see the same
    batch; statistics pool over samples, positions and channels.
    """
    kind = model.config.kind
    if kind not in TRANSFORMER_KINDS:
        raise ContractError(f"layer stats need a transformer kind, got {kind}")
    if not probe_samples:
        raise ContractError("layer_signal_stats() needs a nonempty probe batch")
    collected: dict[str, list[np.ndarray]] = {}
    with ad.no_grad():
        for s in probe_samples:
            trace: list[tuple[str, np.ndarray]] = []
            model.forward(s.input_days, teacher=s.target_days, trace=trace)
            for name, values in trace:
                collected.setdefault(name, []).append(values.reshape(-1))
    stats = {}
    for name in collected:
        pooled = np.concatenate(collected[name])
        stats[name] = (float(pooled.mean()), float(pooled.var()))
    return LayerStats(model_kind=kind, tag=tag, stats=stats)


# ---------------------------------------------------------------------------
# granularity experiment
# ---------------------------------------------------------------------------


def _samples_by_dealer(samples: list[Sample]) -> dict[str, list[Sample]]:
    grouped: dict[str, list[Sample]] = {}
    for s in samples:
        grouped.setdefault(s.dealer_id, []).append(s)
    return grouped


def training_units(
    granularity: str,
    train_samples: list[Sample],
    assignment: ClusterAssignment | dict[str, int],
) -> list[tuple[str, list[Sample]]]:
    """Decompose the training set into (unit tag, unit samples) groups."""
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else assignment
    if granularity == "single":
        return [("single", list(train_samples))]
    if granularity == "cluster":
        grouped: dict[int, list[Sample]] = {}
        for s in train_samples:
            if s.dealer_id not in labels:
                raise ContractError(f"dealer {s.dealer_id} missing from cluster assignment")
            grouped.setdefault(labels[s.dealer_id], []).append(s)
        return [(f"cluster{c}", grouped[c]) for c in sorted(grouped)]
    if granularity == "individual":
        by_dealer = _samples_by_dealer(train_samples)
        return [(f"dealer_{d}", by_dealer[d]) for d in sorted(by_dealer)]
    raise ContractError(f"unknown granularity {granularity!r}")


def unit_test_samples(tag: str, test_samples: list[Sample], labels: dict[str, int]) -> list[Sample]:
    """Test samples belonging to one training unit."""
    if tag == "single":
        return list(test_samples)
    if tag.startswith("cluster"):
        label = int(tag[len("cluster"):])
        return [s for s in test_samples if labels[s.dealer_id] == label]
    dealer = tag[len("dealer_"):]
    return [s for s in test_samples if s.dealer_id == dealer]


def _aggregate_cluster_rows(
    kind: str,
    granularity: str,
    counts_by_cluster: dict[int, np.ndarray],
) -> list[EvalReport]:
    rows = [
        EvalReport.from_counts(kind, granularity, str(label), *counts_by_cluster[label].tolist())
        for label in sorted(counts_by_cluster)
    ]
    pooled = np.sum(list(counts_by_cluster.values()), axis=0) if counts_by_cluster else np.zeros(4, np.int64)
    rows.append(EvalReport.from_counts(kind, granularity, "all", *np.asarray(pooled, dtype=np.int64).tolist()))
    return rows


def run_granularity_experiment(
    config: ModelConfig,
    train_samples: list[Sample],
    test_samples: list[Sample],
    assignment: ClusterAssignment | dict[str, int],
    spec: TrainSpec,
    granularities: tuple[str, ...] = GRANULARITIES,
    mode: str = "per_day",
) -> list[EvalReport]:
    """Train and evaluate one model kind at each requested granularity.

    Every unit model starts from the same seeded initialization, so the
    degenerate one-dealer market yields identical scores across
    granularities.  Units without training samples are skipped with a
    warning; rows aggregate confusion counts per cluster plus an "all" row.
    """
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else assignment
    for s in train_samples + test_samples:
        if s.dealer_id not in labels:
            raise ContractError(f"dealer {s.dealer_id} missing from cluster assignment")
    rows: list[EvalReport] = []
    for granularity in granularities:
        counts_by_cluster: dict[int, np.ndarray] = {}
        if granularity == "individual":
            untrained = sorted(
                {s.dealer_id for s in test_samples} - {s.dealer_id for s in train_samples}
            )
            for dealer in untrained:
                warnings.warn(f"individual: dealer {dealer} has no training samples; skipped")
        for tag, unit_train in training_units(granularity, train_samples, labels):
            unit_test = unit_test_samples(tag, test_samples, labels)
            if not unit_train:
                warnings.warn(f"{granularity}: unit {tag} has no training samples; skipped")
                continue
            model = build_model(config)
            train(model, unit_train, spec)
            if not unit_test:
                warnings.warn(f"{granularity}: unit {tag} has no test samples; skipped")
                continue
            report = evaluate(
                model, unit_test, spec.threshold, mode=mode,
                cluster_of=labels, granularity=granularity, cluster_tag=tag,
            )
            for label, sub in (report.per_cluster or {}).items():
                counts_by_cluster.setdefault(label, np.zeros(4, dtype=np.int64))
                counts_by_cluster[label] += np.array([sub.tp, sub.fp, sub.fn, sub.tn], dtype=np.int64)
        rows.extend(_aggregate_cluster_rows(config.kind, granularity, counts_by_cluster))
    return rows


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_reports(path, rows: list[EvalReport]) -> None:
    """CSV table: model, granularity, cluster, tp, fp, fn, precision, recall, f1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "granularity", "cluster", "tp", "fp", "fn", "precision", "recall", "f1"])
        for r in rows:
            writer.writerow(
                [r.model_kind, r.granularity, r.cluster, r.tp, r.fp, r.fn,
                 repr(r.precision), repr(r.recall), repr(r.f1)]
            )


def read_reports(path) -> list[EvalReport]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            model, granularity, cluster, tp, fp, fn, precision, recall, f1 = row
            tp, fp, fn = int(tp), int(fp), int(fn)
            rows.append(
                EvalReport(model, granularity, cluster, tp, fp, fn, 0,
                           float(precision), float(recall), float(f1))
            )
    return rows


def write_layer_stats(path, stats_list: list[LayerStats]) -> None:
    """CSV table: model, layer, mean, variance (one block per checkpoint tag)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "layer", "mean", "variance"])
        for stats in stats_list:
            for layer, (mean, variance) in stats.stats.items():
                writer.writerow([stats.model_kind, layer, repr(mean), repr(variance)])
