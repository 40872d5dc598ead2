"""Weighted multi-label challenge score and per-class AUROC.

The challenge score credits partially-correct label sets through a reward
matrix: each recording contributes 1/n_r to every (true class, predicted
class) cell, where n_r is the size of the union of its true and predicted
label sets (floored at 1). The raw weighted sum is normalized so that a
perfect classifier scores 1.0 and a classifier that always outputs only the
normal class scores 0.0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentRangeError, RecordFormatError, ShapeError, UndefinedScoreError


@dataclass
class WeightMatrix:
    """Class-by-class reward matrix with a designated normal class."""

    w: np.ndarray
    class_codes: list[str]
    normal_class_index: int

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        c = len(self.class_codes)
        if self.w.shape != (c, c):
            raise ShapeError(f"weight matrix shape {self.w.shape} does not match {c} class codes")
        if not np.allclose(np.diag(self.w), 1.0, atol=0.0):
            raise RecordFormatError("weight matrix diagonal entries must all equal 1.0")
        if not (0 <= self.normal_class_index < c):
            raise ArgumentRangeError(f"normal_class_index {self.normal_class_index} out of range for {c} classes")


def load_weight_matrix(path, normal_class: str) -> WeightMatrix:
    """Read a reward matrix CSV (header row and column of class codes)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise RecordFormatError(f"{path}: empty weight matrix file")
    codes = [c.strip() for c in rows[0][1:]]
    mat = np.zeros((len(codes), len(codes)))
    for i, row in enumerate(rows[1:]):
        if row[0].strip() != codes[i]:
            raise RecordFormatError(f"{path}: row label {row[0]!r} does not match column order")
        mat[i] = [float(v) for v in row[1:]]
    if normal_class not in codes:
        raise ArgumentRangeError(f"normal class {normal_class!r} not among weight matrix codes")
    return WeightMatrix(mat, codes, codes.index(normal_class))


def save_weight_matrix(path, weights: WeightMatrix):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([""] + weights.class_codes)
        for code, row in zip(weights.class_codes, weights.w):
            out.writerow([code] + [repr(float(v)) for v in row])


def synthetic_weight_matrix(class_codes: list[str], normal_class: str) -> WeightMatrix:
    """Identity plus geometrically decaying off-diagonals.

    A stand-in reward matrix for offline tests; scores computed with it are
    not comparable to any official leaderboard.
    """
    c = len(class_codes)
    idx = np.arange(c)
    w = 0.5 ** np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    return WeightMatrix(w, class_codes, class_codes.index(normal_class))


def _check_binary(name: str, m: np.ndarray):
    if not np.isin(m, (0, 1)).all():
        raise ShapeError(f"{name} must be a binary matrix")


def confusion_weighted(labels: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """Generalized confusion matrix A with per-record 1/n_r credit.

    n_r = |true positive set union predicted positive set|, floored at 1.
    A[i, j] accumulates 1/n_r for every true class i and predicted class j.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ShapeError(f"labels {labels.shape} vs predictions {predictions.shape}")
    num_records, num_classes = labels.shape
    a = np.zeros((num_classes, num_classes))
    for r in range(num_records):
        true_idx = np.flatnonzero(labels[r])
        pred_idx = np.flatnonzero(predictions[r])
        n_r = max(len(set(true_idx) | set(pred_idx)), 1)
        if len(true_idx) and len(pred_idx):
            a[np.ix_(true_idx, pred_idx)] += 1.0 / n_r
    return a


def challenge_metric(labels: np.ndarray, predictions: np.ndarray, weights: WeightMatrix) -> float:
    """Normalized weighted score: 1.0 for perfect, 0.0 for always-normal."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    _check_binary("labels", labels)
    _check_binary("predictions", predictions)
    num_records, num_classes = labels.shape
    if weights.w.shape[0] != num_classes:
        raise ShapeError(f"weight matrix is {weights.w.shape[0]}x{weights.w.shape[0]} but data has {num_classes} classes")

    observed = float(np.sum(weights.w * confusion_weighted(labels, predictions)))
    correct = float(np.sum(weights.w * confusion_weighted(labels, labels)))
    normal_only = np.zeros_like(labels)
    normal_only[:, weights.normal_class_index] = 1
    inactive = float(np.sum(weights.w * confusion_weighted(labels, normal_only)))

    if correct == inactive:
        raise UndefinedScoreError(
            "perfect and always-normal predictors score identically on this dataset; metric undefined"
        )
    return (observed - inactive) / (correct - inactive)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Probability a random positive outscores a random negative, ties half-credited.

    Returns None when labels contain a single class (undefined).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary("labels", labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    p = int(labels.sum())
    n = len(labels) - p
    if p == 0 or n == 0:
        return None
    # Average ranks give the Mann-Whitney U statistic exactly, ties included.
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - p * (p + 1) / 2.0
    return u / (p * n)


def macro_auroc(per_class: list[float | None]) -> float | None:
    """Mean over classes where the AUROC is defined."""
    defined = [v for v in per_class if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def per_class_auroc(scores: np.ndarray, labels: np.ndarray) -> list[float | None]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    return [auroc(scores[:, k], labels[:, k]) for k in range(scores.shape[1])]


def save_label_csv(path, record_ids: list[str], matrix: np.ndarray, class_codes: list[str]):
    """Binary labels or predictions: record_id,<c1>,...,<cC>."""
    matrix = np.asarray(matrix)
    _check_binary("matrix", matrix)
    if matrix.shape != (len(record_ids), len(class_codes)):
        raise ShapeError(f"matrix {matrix.shape} vs {len(record_ids)} records x {len(class_codes)} classes")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["record_id"] + list(class_codes))
        for record_id, row in zip(record_ids, matrix):
            out.writerow([record_id] + [int(v) for v in row])


def load_label_csv(path, class_codes: list[str]) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][1:] != list(class_codes):
        raise RecordFormatError(f"{path}: header does not match class codes {class_codes}")
    record_ids = [r[0] for r in rows[1:]]
    matrix = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    _check_binary("matrix", matrix)
    return record_ids, matrix
