"""EM training loop: per-epoch pseudo-labeling followed by minibatch updates.

Each epoch first solves a transport problem over the unlabeled rows to get
pseudo-labels, then runs one shuffled pass of minibatch SGD. Labeled rows
contribute cross-entropy and join the attraction term with their true labels;
the repulsion term steps the prototype bank once per batch. Ground-truth
labels of unlabeled rows are quarantined: they feed telemetry only.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cluster import KMeansResult, kmeans
from .dataset import EmbeddingDataset
from .errors import DivergenceError, NumericalError, ValidationError
from .metrics import accuracy
from .representation import (
    LossWeights,
    ProjectionHead,
    PrototypeBank,
    apply_prototype_gradient,
    ce_loss_and_grad,
    forward,
    init_head,
    init_prototypes,
    inter_loss_and_grad,
    intra_loss_and_grad,
    predict_probs,
    sgd_step,
    update_prototypes,
)
from .transport import ClassPrior, SinkhornConfig, estep, uniform_prior, update_class_prior

TELEMETRY_HEADER = "epoch,pl_acc,loss_intra,loss_inter,loss_ce,loss_total,residual,prior_entropy"

ABLATIONS = ("full", "no_ot", "no_intra", "no_inter")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 512
    weights: LossWeights = LossWeights(alpha=0.7, tau=0.07)
    # training solves get a tighter iteration budget than the library default:
    # pseudo-label argmaxes stabilize two decades before the marginals polish
    sinkhorn: SinkhornConfig = SinkhornConfig(max_iterations=300)
    lambda1: float = 0.95
    lambda2: float = 0.99
    learning_rate: float = 0.002
    proto_learning_rate: float = 0.001
    momentum: float = 0.0
    head_width: Optional[int] = None
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not np.isfinite(self.proto_learning_rate) or self.proto_learning_rate < 0:
            raise ValidationError("proto_learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.head_width is not None and self.head_width < 1:
            raise ValidationError("head_width must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")


@dataclass(frozen=True)
class EpochTelemetry:
    epoch: int
    pseudo_label_accuracy: float
    loss_intra: float
    loss_inter: float
    loss_ce: float
    loss_total: float
    sinkhorn_residual: float
    prior_entropy: float


@dataclass(frozen=True)
class TrainResult:
    head: ProjectionHead
    bank: PrototypeBank
    prior: ClassPrior
    telemetry: List[EpochTelemetry]


def ablation_variant(config: TrainConfig) -> TrainConfig:
    """Rewrite the loss mix for the named ablation; full and no_ot pass through."""
    if config.ablation == "no_intra":
        return replace(config, weights=LossWeights(alpha=0.0, tau=config.weights.tau))
    if config.ablation == "no_inter":
        return replace(config, weights=LossWeights(alpha=1.0, tau=config.weights.tau))
    return config


def check_divergence(epoch: int, total: float, first_total: Optional[float]) -> None:
    """Abort when the combined loss is NaN or grew 100x past its epoch-1 value."""
    if np.isnan(total):
        raise DivergenceError(f"loss became NaN at epoch {epoch}")
    if first_total is not None and total > 100.0 * max(abs(first_total), 1e-2):
        raise DivergenceError(
            f"loss {total:.6g} at epoch {epoch} exceeds 100x the first-epoch value {first_total:.6g}"
        )


def kmeans_baseline(embeddings, k: int, seed: int) -> KMeansResult:
    """Plain k-means on raw embeddings: ++ seeding, 10 restarts, best inertia."""
    points = np.asarray(embeddings, dtype=float)
    return kmeans(points, k, np.random.default_rng(seed), restarts=10)


def _prior_entropy(beta: np.ndarray) -> float:
    positive = beta[beta > 0]
    return float(-(positive * np.log(positive)).sum())


def _kmeans_pseudo_labels(representations, bank: PrototypeBank, rng) -> np.ndarray:
    # no_ot ablation: cluster the unlabeled representations, then name each
    # cluster after the most cosine-similar prototype
    result = kmeans(representations, bank.class_count, rng, restarts=1)
    norms = np.linalg.norm(result.centroids, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    sims = (result.centroids / safe[:, None]) @ bank.prototypes.T
    rows, cols = linear_sum_assignment(sims, maximize=True)
    mapping = np.empty(bank.class_count, dtype=np.int64)
    mapping[rows] = cols
    return mapping[result.labels]


def initialize_model(dataset: EmbeddingDataset, config: TrainConfig):
    """Seeded model init: semi-orthogonal head, prototypes from labeled means
    plus spread-out unlabeled centroids, uniform prior.

    Returns (head, bank, prior, rng) with the rng advanced past the init draws.
    """
    rng = np.random.default_rng(config.seed)
    width = config.head_width if config.head_width is not None else dataset.dim
    head = init_head(dataset.dim, width, rng)
    initial_reps, _ = forward(head, dataset.embeddings)
    bank = init_prototypes(
        initial_reps,
        dataset.labels,
        dataset.labeled_mask,
        dataset.class_count_known,
        dataset.class_count,
        rng,
        momentum=config.lambda2,
    )
    prior = uniform_prior(dataset.class_count, momentum=config.lambda1)
    return head, bank, prior, rng


def train(dataset: EmbeddingDataset, config: TrainConfig) -> TrainResult:
    """Run the full EM loop and return the model with per-epoch telemetry."""
    cfg = ablation_variant(config)
    weights = cfg.weights
    sinkhorn_cfg = replace(cfg.sinkhorn)

    n = dataset.sample_count
    k = dataset.class_count
    head, bank, prior, rng = initialize_model(dataset, cfg)

    labeled_mask = dataset.labeled_mask
    unlabeled_idx = np.flatnonzero(~labeled_mask)
    labeled_total = int(labeled_mask.sum())
    # truth for unlabeled rows is quarantined: read for telemetry only
    unlabeled_truth = dataset.labels[unlabeled_idx]

    intra_labels = np.where(labeled_mask, dataset.labels, 0).astype(np.int64)
    telemetry: List[EpochTelemetry] = []
    opt_state = None
    first_total: Optional[float] = None

    for epoch in range(1, cfg.epochs + 1):
        # inputs were validated up front, so numerical errors past this point
        # mean the optimization itself blew up
        try:
            residual = 0.0
            if unlabeled_idx.size:
                reps_u, _ = forward(head, dataset.embeddings[unlabeled_idx])
                if cfg.ablation == "no_ot":
                    pseudo_u = _kmeans_pseudo_labels(reps_u, bank, rng)
                    prior = update_class_prior(prior, np.eye(k)[pseudo_u])
                else:
                    probs = predict_probs(reps_u, bank, weights.tau)
                    plan, pseudo_u, prior = estep(probs, prior, sinkhorn_cfg)
                    residual = plan.marginal_residual
                intra_labels[unlabeled_idx] = pseudo_u

            valid = unlabeled_truth >= 0
            if valid.any():
                pl_acc = accuracy(intra_labels[unlabeled_idx][valid], unlabeled_truth[valid])
            else:
                pl_acc = float("nan")

            sum_intra = 0.0
            sum_inter = 0.0
            sum_ce = 0.0
            batch_count = 0
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                x_b = dataset.embeddings[batch]
                reps_b, _ = forward(head, x_b)
                y_b = intra_labels[batch]

                loss_i, grad_i = intra_loss_and_grad(reps_b, y_b, bank, weights.tau)
                grad_reps = weights.alpha * grad_i

                in_batch_labeled = labeled_mask[batch]
                loss_c = 0.0
                if in_batch_labeled.any():
                    rows = np.flatnonzero(in_batch_labeled)
                    loss_c, grad_c = ce_loss_and_grad(
                        reps_b[rows], dataset.labels[batch][rows], bank, weights.tau
                    )
                    scattered = np.zeros_like(reps_b)
                    scattered[rows] = grad_c
                    grad_reps = grad_reps + scattered

                loss_r, grad_r = inter_loss_and_grad(bank, weights.tau)

                head, opt_state = sgd_step(
                    head, x_b, grad_reps, cfg.learning_rate, cfg.momentum, opt_state
                )
                bank = apply_prototype_gradient(
                    bank, (1.0 - weights.alpha) * grad_r, cfg.proto_learning_rate
                )
                bank = update_prototypes(bank, reps_b, y_b)

                sum_intra += loss_i * batch.size
                sum_inter += loss_r
                sum_ce += loss_c * int(in_batch_labeled.sum())
                batch_count += 1

            loss_intra = sum_intra / n
            loss_inter = sum_inter / batch_count
            loss_ce = sum_ce / labeled_total if labeled_total else 0.0
            loss_total = weights.alpha * loss_intra + (1.0 - weights.alpha) * loss_inter + loss_ce
        except (ValidationError, NumericalError) as exc:
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc

        telemetry.append(EpochTelemetry(
            epoch=epoch,
            pseudo_label_accuracy=float(pl_acc),
            loss_intra=float(loss_intra),
            loss_inter=float(loss_inter),
            loss_ce=float(loss_ce),
            loss_total=float(loss_total),
            sinkhorn_residual=float(residual),
            prior_entropy=_prior_entropy(prior.beta),
        ))
        check_divergence(epoch, loss_total, first_total)
        if first_total is None:
            first_total = loss_total

    return TrainResult(head=head, bank=bank, prior=prior, telemetry=telemetry)


def _telemetry_fields(row: EpochTelemetry):
    return (
        row.pseudo_label_accuracy,
        row.loss_intra,
        row.loss_inter,
        row.loss_ce,
        row.loss_total,
        row.sinkhorn_residual,
        row.prior_entropy,
    )


def write_telemetry_csv(telemetry, path) -> None:
    """One row per epoch under a fixed header; floats use repr for exact reload."""
    lines = [TELEMETRY_HEADER]
    for row in telemetry:
        lines.append(",".join([str(row.epoch)] + [repr(v) for v in _telemetry_fields(row)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_telemetry_json(telemetry, path) -> None:
    keys = TELEMETRY_HEADER.split(",")
    rows = []
    for row in telemetry:
        values = [row.epoch] + list(_telemetry_fields(row))
        rows.append(dict(zip(keys, values)))
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")
