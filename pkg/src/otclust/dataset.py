"""Embedding dataset loading, splitting, and synthetic generation.

A dataset is N embedding rows with per-row optional ground-truth labels and a
labeled mask. Known classes occupy ids [0, class_count_known); novel classes
follow. Ground truth on unlabeled rows is kept for evaluation only; training
code must never read labels where the mask is false.

On-disk formats are self-describing in D but carry no class-count metadata,
so loading infers class_count_known as 1 + max labeled id (exact for any
split produced here, which labels at least one sample per known class) and
class_count_novel from the remaining ground-truth ids.
"""

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError

MISSING_LABEL = -1


@dataclass(frozen=True)
class EmbeddingDataset:
    """Immutable embedding collection with known/novel class structure."""

    embeddings: np.ndarray
    labels: np.ndarray
    labeled_mask: np.ndarray
    class_count_known: int
    class_count_novel: int

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        mask = np.array(self.labeled_mask, dtype=bool)
        if emb.ndim != 2:
            raise ValidationError("embeddings must be an N x D matrix")
        n, d = emb.shape
        if d < 1:
            raise ValidationError("embedding dimension must be at least 1")
        if not np.all(np.isfinite(emb)):
            raise ValidationError("embeddings must be finite")
        if labels.shape != (n,) or mask.shape != (n,):
            raise ValidationError("labels and labeled_mask must have one entry per row")
        k = self.class_count_known + self.class_count_novel
        if self.class_count_known < 0 or self.class_count_novel < 0:
            raise ValidationError("class counts must be nonnegative")
        if k < 2:
            raise ValidationError("need at least 2 classes in total")
        if n < k:
            raise ValidationError(f"need at least {k} rows for {k} classes, got {n}")
        if (labels[mask] < 0).any():
            raise ValidationError("labeled rows must carry a label")
        if mask.any() and labels[mask].max() >= self.class_count_known:
            raise ValidationError("labeled rows may only carry known-class labels")
        present = labels[labels >= 0]
        if present.size and present.max() >= k:
            raise ValidationError("label id exceeds the declared class count")
        for arr in (emb, labels, mask):
            arr.flags.writeable = False
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "labeled_mask", mask)

    @property
    def sample_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def class_count(self) -> int:
        return self.class_count_known + self.class_count_novel


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: float
    known_class_ratio: float
    seed: int
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValidationError("labeled_fraction must lie in (0, 1]")
        if not 0.0 < self.known_class_ratio <= 1.0:
            raise ValidationError("known_class_ratio must lie in (0, 1]")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int
    dim: int
    samples_per_class: int
    cluster_spread: float = 1.0
    center_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValidationError("class_count must be at least 2")
        if self.samples_per_class < 2:
            raise ValidationError("samples_per_class must be at least 2")
        if self.dim < 1:
            raise ValidationError("dim must be at least 1")
        if self.cluster_spread < 0:
            raise ValidationError("cluster_spread must be nonnegative")
        if self.center_scale <= 0:
            raise ValidationError("center_scale must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Isotropic Gaussian mixture with per-coordinate center std scale/D.

    Fully labeled; split it with make_split to obtain the semi-supervised
    discovery setting.
    """
    rng = np.random.default_rng(spec.seed)
    k, d, per = spec.class_count, spec.dim, spec.samples_per_class
    centers = rng.standard_normal((k, d)) * (spec.center_scale / d)
    noise = rng.standard_normal((k * per, d)) * spec.cluster_spread
    return EmbeddingDataset(
        embeddings=np.repeat(centers, per, axis=0) + noise,
        labels=np.repeat(np.arange(k), per),
        labeled_mask=np.ones(k * per, dtype=bool),
        class_count_known=k,
        class_count_novel=0,
    )


def make_split(dataset: EmbeddingDataset, spec: SplitSpec) -> EmbeddingDataset:
    """Re-split a fully labeled dataset into the semi-supervised setting.

    Class ids are shuffled by the seed and renumbered so known classes come
    first; labeled_fraction of each known class's rows (ceiling, so never
    zero) keep their labels, everything else becomes unlabeled. With
    stratified=False the labeled quota is drawn from the pooled known rows
    instead of per class.
    """
    if (dataset.labels < 0).any():
        raise ValidationError("make_split needs ground-truth labels on every row")
    k_true = dataset.class_count
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(k_true)
    known_count = math.ceil(spec.known_class_ratio * k_true)
    new_id = np.empty(k_true, dtype=np.int64)
    new_id[order] = np.arange(k_true)
    labels = new_id[dataset.labels]

    mask = np.zeros(dataset.sample_count, dtype=bool)
    known_rows = labels < known_count
    if spec.stratified:
        for cls in range(known_count):
            rows = np.flatnonzero(labels == cls)
            if rows.size == 0:
                raise ValidationError(f"known class {cls} has no samples to label")
            quota = min(rows.size, math.ceil(spec.labeled_fraction * rows.size))
            mask[rng.permutation(rows)[:quota]] = True
    else:
        pool = np.flatnonzero(known_rows)
        quota = min(pool.size, math.ceil(spec.labeled_fraction * pool.size))
        mask[rng.permutation(pool)[:quota]] = True
        for cls in range(known_count):
            if not mask[labels == cls].any():
                raise ValidationError(
                    f"known class {cls} received no labeled samples; "
                    "use stratified sampling or a larger labeled_fraction"
                )
    return EmbeddingDataset(
        embeddings=dataset.embeddings,
        labels=labels,
        labeled_mask=mask,
        class_count_known=known_count,
        class_count_novel=k_true - known_count,
    )


def _infer_class_counts(labels: np.ndarray, mask: np.ndarray):
    labeled = labels[mask]
    known = int(labeled.max()) + 1 if labeled.size else 0
    present = labels[labels >= 0]
    total = int(present.max()) + 1 if present.size else 0
    return known, max(total - known, 0)


def _dataset_from_rows(embeddings, labels, mask) -> EmbeddingDataset:
    if not embeddings:
        raise ValidationError("file contains no data rows")
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    known, novel = _infer_class_counts(labels, mask)
    if known + novel < 2:
        raise ValidationError(
            "cannot infer class structure: file needs ground-truth labels "
            "covering at least 2 classes"
        )
    return EmbeddingDataset(
        embeddings=emb,
        labels=labels,
        labeled_mask=mask,
        class_count_known=known,
        class_count_novel=novel,
    )


def _parse_label(text: str, row: int) -> int:
    if text == "":
        return MISSING_LABEL
    try:
        value = int(text)
    except ValueError:
        raise ValidationError(f"row {row}: label {text!r} is not an integer") from None
    if value < 0:
        raise ValidationError(f"row {row}: label must be nonnegative, got {value}")
    return value


def _load_csv(path: str) -> EmbeddingDataset:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("file is empty") from None
        dim = len(header) - 2
        expected = ["label", "mask"] + [f"e{i}" for i in range(dim)]
        if dim < 1 or header != expected:
            raise ValidationError(f"bad CSV header: {header!r}")
        embeddings, labels, mask = [], [], []
        for row_number, row in enumerate(reader):
            if len(row) != dim + 2:
                raise ValidationError(
                    f"row {row_number}: expected {dim + 2} fields, got {len(row)}"
                )
            labels.append(_parse_label(row[0], row_number))
            if row[1] not in ("0", "1"):
                raise ValidationError(f"row {row_number}: mask must be 0 or 1, got {row[1]!r}")
            mask.append(row[1] == "1")
            try:
                embeddings.append([float(v) for v in row[2:]])
            except ValueError:
                raise ValidationError(f"row {row_number}: non-numeric embedding entry") from None
            if mask[-1] and labels[-1] == MISSING_LABEL:
                raise ValidationError(f"row {row_number}: labeled row is missing its label")
    return _dataset_from_rows(embeddings, labels, mask)


def _load_jsonl(path: str) -> EmbeddingDataset:
    embeddings, labels, mask = [], [], []
    dim: Optional[int] = None
    with open(path) as handle:
        for row_number, line in enumerate(handle):
            if not line.strip():
                raise ValidationError(f"row {row_number}: blank line")
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"row {row_number}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict) or set(record) != {"label", "labeled", "embedding"}:
                raise ValidationError(
                    f"row {row_number}: expected keys label, labeled, embedding"
                )
            label = record["label"]
            if label is None:
                labels.append(MISSING_LABEL)
            elif isinstance(label, int) and not isinstance(label, bool) and label >= 0:
                labels.append(label)
            else:
                raise ValidationError(f"row {row_number}: label must be null or a nonnegative integer")
            if not isinstance(record["labeled"], bool):
                raise ValidationError(f"row {row_number}: labeled must be a boolean")
            mask.append(record["labeled"])
            vector = record["embedding"]
            if not isinstance(vector, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in vector
            ):
                raise ValidationError(f"row {row_number}: embedding must be a list of numbers")
            if dim is None:
                dim = len(vector)
            if len(vector) != dim:
                raise ValidationError(
                    f"row {row_number}: embedding has {len(vector)} entries, expected {dim}"
                )
            if mask[-1] and labels[-1] == MISSING_LABEL:
                raise ValidationError(f"row {row_number}: labeled row is missing its label")
            embeddings.append([float(v) for v in vector])
    return _dataset_from_rows(embeddings, labels, mask)


def load_dataset(path: str, format: str) -> EmbeddingDataset:
    """Read a dataset file; errors name the offending row."""
    if format == "csv":
        return _load_csv(path)
    if format == "jsonl":
        return _load_jsonl(path)
    raise ValidationError(f"unknown dataset format {format!r}")


def save_dataset(dataset: EmbeddingDataset, path: str, format: str) -> None:
    """Write a dataset so load_dataset reproduces it bit for bit."""
    if format == "csv":
        with open(path, "w", newline="") as handle:
            header = "label,mask," + ",".join(f"e{i}" for i in range(dataset.dim))
            handle.write(header + "\n")
            for label, flag, row in zip(
                dataset.labels, dataset.labeled_mask, dataset.embeddings
            ):
                label_text = "" if label == MISSING_LABEL else str(int(label))
                values = ",".join(repr(float(v)) for v in row)
                handle.write(f"{label_text},{int(flag)},{values}\n")
    elif format == "jsonl":
        with open(path, "w") as handle:
            for label, flag, row in zip(
                dataset.labels, dataset.labeled_mask, dataset.embeddings
            ):
                record = {
                    "label": None if label == MISSING_LABEL else int(label),
                    "labeled": bool(flag),
                    "embedding": [float(v) for v in row],
                }
                handle.write(json.dumps(record) + "\n")
    else:
        raise ValidationError(f"unknown dataset format {format!r}")
