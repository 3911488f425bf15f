"""Downstream evaluation: train-split feature standardization, exhaustive
KNN classification, and the reported metrics (overall accuracy, micro F1,
mean average precision).

Every tie is broken deterministically: equal distances prefer the lower
train-row index, equal votes the lower class index, equal ranking scores
the lower sample index. Distances accumulate in float64 so neighbor order
is stable across block sizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    EmptyMatrix,
    LengthMismatch,
    NoPositives,
    ShapeMismatch,
    TaskMismatch,
)
from .extractors import FeatureMatrix

TIE_POLICY_VERSION = 1

_QUERY_BLOCK = 256


@dataclass(frozen=True)
class FeatureScaler:
    """Per-dimension train-split standardization; zero stds become 1."""

    means: np.ndarray
    stds: np.ndarray


def fit_scaler(train: FeatureMatrix) -> FeatureScaler:
    if train.n == 0:
        raise EmptyMatrix("cannot fit scaler on empty matrix")
    x = train.values.astype(np.float64)
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds[stds == 0] = 1.0
    return FeatureScaler(means=means, stds=stds)


def apply_scaler(scaler: FeatureScaler, m: FeatureMatrix) -> FeatureMatrix:
    if m.dim != scaler.means.shape[0]:
        raise DimensionMismatch(f"matrix dim {m.dim} != scaler dim {scaler.means.shape[0]}")
    scaled = (m.values.astype(np.float64) - scaler.means) / scaler.stds
    return FeatureMatrix(values=scaled.astype(np.float32), ids=list(m.ids),
                         labels=list(m.labels))


@dataclass
class KnnModel:
    """Brute-force squared-Euclidean KNN over standardized train features."""

    k: int
    train: FeatureMatrix

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k > self.train.n:
            raise ValueError(f"k={self.k} exceeds {self.train.n} train rows")


def _neighbor_indices(model: KnnModel, queries: FeatureMatrix) -> np.ndarray:
    """(n_query, k) train-row indices of the k nearest neighbors, distance
    ties resolved toward the lower train-row index."""
    if queries.dim != model.train.dim:
        raise DimensionMismatch(
            f"query dim {queries.dim} != train dim {model.train.dim}"
        )
    train = model.train.values.astype(np.float64)
    train_sq = (train * train).sum(axis=1)
    k = model.k
    out = np.empty((queries.n, k), dtype=np.int64)
    for start in range(0, queries.n, _QUERY_BLOCK):
        q = queries.values[start:start + _QUERY_BLOCK].astype(np.float64)
        d2 = (q * q).sum(axis=1)[:, None] + train_sq[None, :] - 2.0 * (q @ train.T)
        # stable sort keeps the lower train index first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:start + q.shape[0]] = order[:, :k]
    return out


def knn_predict_multiclass(model: KnnModel, queries: FeatureMatrix) -> np.ndarray:
    """Majority class among the k nearest; vote ties take the lower class index."""
    if model.train.task != "multiclass":
        raise TaskMismatch("model was built on non-multiclass labels")
    neighbors = _neighbor_indices(model, queries)
    train_labels = model.train.label_indices()
    num_classes = int(train_labels.max()) + 1
    votes = train_labels[neighbors]  # (n_query, k)
    preds = np.empty(queries.n, dtype=np.int64)
    for i in range(queries.n):
        counts = np.bincount(votes[i], minlength=num_classes)
        preds[i] = counts.argmax()  # argmax returns the first (lowest) class
    return preds


def knn_scores_multilabel(model: KnnModel, queries: FeatureMatrix) -> np.ndarray:
    """score[q, j] = fraction of the k nearest train rows with class j set."""
    if model.train.task != "multilabel":
        raise TaskMismatch("model was built on non-multilabel labels")
    neighbors = _neighbor_indices(model, queries)
    bits = model.train.label_bits()  # (n_train, K)
    counts = bits[neighbors].sum(axis=1)  # (n_query, K)
    return counts / float(model.k)


def multilabel_predictions(scores: np.ndarray) -> np.ndarray:
    """Binary decisions at the 0.5 threshold; an exact half predicts positive."""
    return np.asarray(scores, dtype=np.float64) >= 0.5


def overall_accuracy(pred: Sequence[int] | np.ndarray,
                     truth: Sequence[int] | np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise EmptyInput("no predictions")
    return 100.0 * float((pred == truth).mean())


def micro_f1(pred_bits: np.ndarray, truth_bits: np.ndarray) -> float:
    """F1 with TP/FP/FN pooled over every (sample, class) pair."""
    pred_bits = np.asarray(pred_bits, dtype=bool)
    truth_bits = np.asarray(truth_bits, dtype=bool)
    if pred_bits.shape != truth_bits.shape:
        raise ShapeMismatch(f"pred {pred_bits.shape} vs truth {truth_bits.shape}")
    tp = int((pred_bits & truth_bits).sum())
    fp = int((pred_bits & ~truth_bits).sum())
    fn = int((~pred_bits & truth_bits).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 100.0 * 2 * tp / denom


def macro_f1(pred_bits: np.ndarray, truth_bits: np.ndarray) -> float:
    """Unweighted mean of per-class F1; classes with an empty denominator
    contribute 0."""
    pred_bits = np.asarray(pred_bits, dtype=bool)
    truth_bits = np.asarray(truth_bits, dtype=bool)
    if pred_bits.shape != truth_bits.shape:
        raise ShapeMismatch(f"pred {pred_bits.shape} vs truth {truth_bits.shape}")
    tp = (pred_bits & truth_bits).sum(axis=0).astype(np.float64)
    fp = (pred_bits & ~truth_bits).sum(axis=0).astype(np.float64)
    fn = (~pred_bits & truth_bits).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return 100.0 * float(f1.mean())


def mean_average_precision(scores: np.ndarray, truth_bits: np.ndarray) -> float:
    """Mean over classes (with at least one positive) of uninterpolated
    average precision; score ties rank the lower sample index first."""
    scores = np.asarray(scores, dtype=np.float64)
    truth_bits = np.asarray(truth_bits, dtype=bool)
    if scores.shape != truth_bits.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs truth {truth_bits.shape}")
    n, num_classes = scores.shape
    aps = []
    for j in range(num_classes):
        positives = int(truth_bits[:, j].sum())
        if positives == 0:
            continue
        order = np.argsort(-scores[:, j], kind="stable")
        hits = truth_bits[order, j]
        ranks = np.arange(1, n + 1, dtype=np.float64)
        precision_at = np.cumsum(hits) / ranks
        aps.append(float(precision_at[hits].sum() / positives))
    if not aps:
        raise NoPositives("no class has a positive sample")
    return 100.0 * float(np.mean(aps))


@dataclass
class MetricReport:
    task: str
    k: int
    n_train: int
    n_test: int
    dim: int
    oa: float | None = None
    f1_micro: float | None = None
    f1_macro: float | None = None
    map: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "k": self.k,
            "oa": self.oa,
            "f1_micro": self.f1_micro,
            "f1_macro": self.f1_macro,
            "map": self.map,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "d": self.dim,
            "tie_policy_version": TIE_POLICY_VERSION,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    def metrics(self) -> dict[str, float]:
        out = {}
        for name in ("oa", "f1_micro", "f1_macro", "map"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def evaluate(train: FeatureMatrix, test: FeatureMatrix, k: int = 5) -> MetricReport:
    """Standardize on train, classify test with KNN, report the metrics
    appropriate to the task."""
    if train.n == 0:
        raise EmptyMatrix("empty train matrix")
    if train.dim != test.dim:
        raise DimensionMismatch(f"train dim {train.dim} != test dim {test.dim}")
    if train.task != test.task:
        raise TaskMismatch(f"train task {train.task} != test task {test.task}")
    scaler = fit_scaler(train)
    train_s = apply_scaler(scaler, train)
    test_s = apply_scaler(scaler, test)
    model = KnnModel(k=k, train=train_s)
    report = MetricReport(task=train.task, k=k, n_train=train.n, n_test=test.n,
                          dim=train.dim)
    if train.task == "multiclass":
        preds = knn_predict_multiclass(model, test_s)
        report.oa = overall_accuracy(preds, test_s.label_indices())
    else:
        scores = knn_scores_multilabel(model, test_s)
        preds = multilabel_predictions(scores)
        truth = test_s.label_bits()
        report.f1_micro = micro_f1(preds, truth)
        report.f1_macro = macro_f1(preds, truth)
        report.map = mean_average_precision(scores, truth)
    return report
