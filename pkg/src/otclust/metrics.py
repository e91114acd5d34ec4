"""Clustering quality metrics: aligned accuracy, NMI, ARI, and full reports.

Cluster ids carry no meaning, so accuracy first aligns clusters to classes
with a Hungarian assignment on the confusion matrix. NMI normalizes mutual
information by the arithmetic mean of the two partition entropies; ARI uses
the standard pair-counting expectation correction.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError


def _as_labels(values, name: str) -> np.ndarray:
    if values is None:
        raise ValidationError(f"{name} is required")
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be a 1-d label vector")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{name} must hold integer class ids")
    if arr.size and arr.min() < 0:
        raise ValidationError(f"{name} must be nonnegative")
    return arr.astype(np.int64)


def _paired_labels(predicted, true):
    p = _as_labels(predicted, "predicted")
    t = _as_labels(true, "true")
    if p.shape[0] != t.shape[0]:
        raise ValidationError(
            f"label vectors differ in length: {p.shape[0]} vs {t.shape[0]}"
        )
    if p.shape[0] == 0:
        raise ValidationError("label vectors must be non-empty")
    return p, t


def confusion_matrix(predicted, true, cluster_count: Optional[int] = None,
                     class_count: Optional[int] = None) -> np.ndarray:
    """Count matrix with one row per cluster id and one column per class id."""
    p, t = _paired_labels(predicted, true)
    rows = cluster_count if cluster_count is not None else int(p.max()) + 1
    cols = class_count if class_count is not None else int(t.max()) + 1
    if p.max() >= rows or t.max() >= cols:
        raise ValidationError("label value exceeds the declared count")
    counts = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(counts, (p, t), 1)
    return counts


def hungarian_match(confusion) -> Dict[int, int]:
    """Injective partial cluster-to-class assignment maximizing matched counts.

    Rectangular inputs are zero-padded to square; pairs that match zero
    samples are dropped from the returned mapping.
    """
    c = np.asarray(confusion)
    if c.ndim != 2:
        raise ValidationError("confusion must be a 2-d count matrix")
    if (c < 0).any():
        raise ValidationError("confusion counts must be nonnegative")
    side = max(c.shape)
    padded = np.zeros((side, side), dtype=np.float64)
    padded[: c.shape[0], : c.shape[1]] = c
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return {
        int(r): int(col)
        for r, col in zip(rows, cols)
        if r < c.shape[0] and col < c.shape[1] and c[r, col] > 0
    }


def accuracy(predicted, true) -> float:
    """Fraction of samples correct under the optimal cluster-to-class mapping."""
    p, t = _paired_labels(predicted, true)
    counts = confusion_matrix(p, t)
    mapping = hungarian_match(counts)
    matched = sum(counts[c, k] for c, k in mapping.items())
    return float(matched / p.shape[0])


def nmi(predicted, true) -> float:
    """Mutual information over the arithmetic mean of partition entropies.

    Two trivial partitions define 0/0 as 1; a single trivial side gives 0.
    """
    p, t = _paired_labels(predicted, true)
    counts = confusion_matrix(p, t)
    n = counts.sum()
    joint = counts / n
    row = joint.sum(axis=1)
    col = joint.sum(axis=0)
    nz = joint > 0
    mutual = float(
        (joint[nz] * np.log(joint[nz] / np.outer(row, col)[nz])).sum()
    )
    h_pred = float(-(row[row > 0] * np.log(row[row > 0])).sum())
    h_true = float(-(col[col > 0] * np.log(col[col > 0])).sum())
    if h_pred == 0.0 and h_true == 0.0:
        return 1.0
    value = mutual / ((h_pred + h_true) / 2.0)
    return float(min(max(value, 0.0), 1.0))


def _comb2(x: np.ndarray) -> np.ndarray:
    return x * (x - 1) / 2.0


def ari(predicted, true) -> float:
    """Pair-counting Rand index, corrected for chance."""
    p, t = _paired_labels(predicted, true)
    counts = confusion_matrix(p, t)
    n = counts.sum()
    index = _comb2(counts).sum()
    row_pairs = _comb2(counts.sum(axis=1)).sum()
    col_pairs = _comb2(counts.sum(axis=0)).sum()
    expected = row_pairs * col_pairs / _comb2(np.array(n))
    maximum = (row_pairs + col_pairs) / 2.0
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


@dataclass(frozen=True)
class MetricsReport:
    """Aligned-accuracy report over one evaluation pass.

    acc_known/acc_novel are per-subset accuracies under the single global
    mapping; either is None when its subset is empty.
    """

    acc: float
    nmi: float
    ari: float
    acc_known: Optional[float]
    acc_novel: Optional[float]
    confusion: np.ndarray
    mapping: Dict[int, int]

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "nmi": self.nmi,
            "ari": self.ari,
            "acc_known": self.acc_known,
            "acc_novel": self.acc_novel,
            "confusion": self.confusion.tolist(),
            "mapping": {str(c): t for c, t in sorted(self.mapping.items())},
        }


def evaluate(probabilities, true_labels, known_class_count: int) -> MetricsReport:
    """Score argmax cluster assignments against ground truth.

    Classes with id below known_class_count count toward acc_known, the rest
    toward acc_novel; both use the one global Hungarian mapping.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2:
        raise ValidationError("probabilities must be an N x K matrix")
    if not np.all(np.isfinite(probs)):
        raise ValidationError("probabilities must be finite")
    truth = _as_labels(true_labels, "true_labels")
    if truth.shape[0] != probs.shape[0]:
        raise ValidationError(
            f"got {probs.shape[0]} prediction rows but {truth.shape[0]} labels"
        )
    if not 0 <= known_class_count:
        raise ValidationError("known_class_count must be nonnegative")

    predicted = probs.argmax(axis=1)
    counts = confusion_matrix(
        predicted, truth, cluster_count=probs.shape[1], class_count=int(truth.max()) + 1
    )
    mapping = hungarian_match(counts)
    mapped = np.full(probs.shape[1], -1, dtype=np.int64)
    for cluster, cls in mapping.items():
        mapped[cluster] = cls
    correct = mapped[predicted] == truth

    known_rows = truth < known_class_count
    novel_rows = ~known_rows
    acc_known = float(correct[known_rows].mean()) if known_rows.any() else None
    acc_novel = float(correct[novel_rows].mean()) if novel_rows.any() else None
    return MetricsReport(
        acc=float(correct.mean()),
        nmi=nmi(predicted, truth),
        ari=ari(predicted, truth),
        acc_known=acc_known,
        acc_novel=acc_novel,
        confusion=counts,
        mapping=mapping,
    )
