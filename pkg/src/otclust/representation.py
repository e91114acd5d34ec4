"""Representation learning over a frozen embedding space.

A single affine projection followed by L2 normalization maps embeddings onto
the unit sphere, where class prototypes live. Three losses act on that sphere:
a prototype-attraction term on pseudo-labeled rows, a prototype-repulsion term
on the bank itself, and plain cross-entropy on labeled rows. All gradients are
closed-form; there is no autodiff anywhere.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cluster import kmeans
from .errors import ValidationError

ZERO_NORM_FLOOR = 1e-12


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.flags.writeable = False
    return out


def _normalize_rows(matrix: np.ndarray):
    """Scale rows to unit norm; rows below the floor become e1 and are flagged."""
    norms = np.linalg.norm(matrix, axis=1)
    degenerate = norms < ZERO_NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms)
    out = matrix / safe[:, None]
    if degenerate.any():
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
    return out, degenerate


def _check_tau(tau: float) -> None:
    if not np.isfinite(tau) or tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")


@dataclass(frozen=True)
class ProjectionHead:
    """Affine map into the representation space, prior to normalization."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=float)
        bias = np.asarray(self.bias, dtype=float)
        if weight.ndim != 2:
            raise ValidationError("weight must be a 2-d array")
        if bias.ndim != 1 or bias.shape[0] != weight.shape[1]:
            raise ValidationError("bias length must match weight output width")
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise ValidationError("head parameters must be finite")
        object.__setattr__(self, "weight", _frozen(weight))
        object.__setattr__(self, "bias", _frozen(bias))


@dataclass(frozen=True)
class PrototypeBank:
    """Unit-norm class prototypes with the EMA momentum used to update them."""

    prototypes: np.ndarray
    momentum: float

    def __post_init__(self):
        protos = np.asarray(self.prototypes, dtype=float)
        if protos.ndim != 2 or protos.shape[0] < 1:
            raise ValidationError("prototypes must be a non-empty 2-d array")
        if not np.isfinite(protos).all():
            raise ValidationError("prototypes must be finite")
        norms = np.linalg.norm(protos, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValidationError("prototype rows must have unit norm")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError(f"momentum must lie in [0, 1], got {self.momentum}")
        object.__setattr__(self, "prototypes", _frozen(protos))

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """Mixing weight between attraction/repulsion terms plus the shared temperature."""

    alpha: float
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class SGDState:
    """Momentum buffers for the projection head."""

    weight_velocity: np.ndarray
    bias_velocity: np.ndarray


def init_head(dim: int, width: int, rng: np.random.Generator) -> ProjectionHead:
    """Random semi-orthogonal weight (QR with sign fix), zero bias."""
    if dim < 1 or width < 1:
        raise ValidationError("head dimensions must be positive")
    big, small = max(dim, width), min(dim, width)
    gauss = rng.standard_normal((big, small))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))[None, :]
    weight = q if (dim, width) == (big, small) else q.T
    return ProjectionHead(weight=weight, bias=np.zeros(width))


def forward(head: ProjectionHead, embeddings: np.ndarray):
    """Project embeddings and normalize rows onto the unit sphere.

    Returns (representations, degenerate_mask); flagged rows had a pre-norm
    below the floor and were replaced by the first canonical basis vector.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise ValidationError("embeddings must be a 2-d array")
    if x.shape[1] != head.weight.shape[0]:
        raise ValidationError(
            f"embedding dim {x.shape[1]} does not match head input dim {head.weight.shape[0]}"
        )
    if not np.isfinite(x).all():
        raise ValidationError("embeddings must be finite")
    z = x @ head.weight + head.bias
    return _normalize_rows(z)


def _check_representations(representations: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    s = np.asarray(representations, dtype=float)
    if s.ndim != 2:
        raise ValidationError("representations must be a 2-d array")
    if s.shape[1] != bank.prototypes.shape[1]:
        raise ValidationError("representation width does not match prototype width")
    if not np.isfinite(s).all():
        raise ValidationError("representations must be finite")
    return s


def _check_labels(labels: np.ndarray, count: int, class_count: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != count:
        raise ValidationError("labels must be 1-d and match the batch size")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise ValidationError(f"labels must lie in [0, {class_count})")
    return y.astype(np.int64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def predict_probs(representations: np.ndarray, bank: PrototypeBank, tau: float) -> np.ndarray:
    """Softmax over prototype similarities at temperature tau, one row per sample."""
    _check_tau(tau)
    s = _check_representations(representations, bank)
    return np.exp(_log_softmax(s @ bank.prototypes.T / tau))


def _prototype_ce(representations, labels, bank, tau):
    # shared core: softmax CE toward prototypes, gradient w.r.t. representations only
    _check_tau(tau)
    s = _check_representations(representations, bank)
    y = _check_labels(labels, s.shape[0], bank.class_count)
    if s.shape[0] == 0:
        return 0.0, np.zeros_like(s)
    logp = _log_softmax(s @ bank.prototypes.T / tau)
    n = s.shape[0]
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    grad = delta @ bank.prototypes / (tau * n)
    return float(loss), grad


def intra_loss_and_grad(representations, pseudo_labels, bank: PrototypeBank, tau: float):
    """Attraction toward assigned prototypes; returns (loss, grad w.r.t. representations)."""
    return _prototype_ce(representations, pseudo_labels, bank, tau)


def ce_loss_and_grad(representations, true_labels, bank: PrototypeBank, tau: float):
    """Cross-entropy on labeled rows; returns (loss, grad w.r.t. representations)."""
    return _prototype_ce(representations, true_labels, bank, tau)


def inter_loss_and_grad(bank: PrototypeBank, tau: float):
    """Repulsion between prototypes; returns (loss, grad w.r.t. prototype rows).

    loss = mean_i log( mean_{j != i} exp(cos(mu_i, mu_j) / tau) ), bounded by
    +-1/tau. The gradient accounts for normalization: each prototype update is
    projected onto the tangent plane of the sphere at that row.
    """
    _check_tau(tau)
    k = bank.class_count
    if k < 2:
        raise ValidationError("inter-cluster loss needs at least two prototypes")
    m = bank.prototypes
    sims = m @ m.T
    logits = sims / tau
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    expo = np.exp(logits - row_max)
    row_sum = expo.sum(axis=1)
    lse = row_max[:, 0] + np.log(row_sum)
    loss = float((lse - np.log(k - 1)).mean())

    weights = expo / row_sum[:, None]
    coeff = (weights + weights.T) / (k * tau)
    grad = coeff @ m - (coeff * sims).sum(axis=1)[:, None] * m
    return loss, grad


def combined_loss(intra: float, inter: float, ce: float, weights: LossWeights) -> float:
    """Weighted sum: alpha * intra + (1 - alpha) * inter + ce."""
    return weights.alpha * intra + (1.0 - weights.alpha) * inter + ce


def update_prototypes(bank: PrototypeBank, representations, pseudo_labels) -> PrototypeBank:
    """EMA-blend each present class mean into its prototype, then renormalize.

    Classes absent from the batch keep their rows bit-for-bit; momentum 1.0 is
    an exact no-op.
    """
    s = _check_representations(representations, bank)
    y = _check_labels(pseudo_labels, s.shape[0], bank.class_count)
    lam = bank.momentum
    if lam == 1.0 or s.shape[0] == 0:
        return bank
    new = np.array(bank.prototypes)
    for cls in np.unique(y):
        mean = s[y == cls].mean(axis=0)
        blended = lam * new[cls] + (1.0 - lam) * mean
        norm = np.linalg.norm(blended)
        if norm < ZERO_NORM_FLOOR:
            blended = np.zeros_like(blended)
            blended[0] = 1.0
            norm = 1.0
        new[cls] = blended / norm
    return PrototypeBank(new, momentum=bank.momentum)


def apply_prototype_gradient(bank: PrototypeBank, grad, learning_rate: float) -> PrototypeBank:
    """One gradient step on the prototype rows followed by renormalization."""
    g = np.asarray(grad, dtype=float)
    if g.shape != bank.prototypes.shape:
        raise ValidationError("gradient shape does not match the prototype bank")
    if not np.isfinite(g).all():
        raise ValidationError("prototype gradient must be finite")
    if learning_rate < 0:
        raise ValidationError("learning rate must be non-negative")
    if learning_rate == 0.0:
        return bank
    stepped = bank.prototypes - learning_rate * g
    normalized, _ = _normalize_rows(stepped)
    return PrototypeBank(normalized, momentum=bank.momentum)


def sgd_step(
    head: ProjectionHead,
    embeddings: np.ndarray,
    grad_representations: np.ndarray,
    learning_rate: float,
    momentum: float = 0.0,
    state: Optional[SGDState] = None,
):
    """Backpropagate a representation gradient through normalization and the
    affine map, then apply one (optionally momentum-accelerated) SGD step.

    Returns (new_head, new_state).
    """
    x = np.asarray(embeddings, dtype=float)
    g = np.asarray(grad_representations, dtype=float)
    if not np.isfinite(g).all():
        raise ValidationError("representation gradient must be finite")
    if learning_rate < 0:
        raise ValidationError("learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValidationError(f"momentum must lie in [0, 1), got {momentum}")
    if x.ndim != 2 or x.shape[1] != head.weight.shape[0]:
        raise ValidationError("embeddings do not match the head input dim")
    if g.shape != (x.shape[0], head.weight.shape[1]):
        raise ValidationError("gradient shape does not match forward output")

    z = x @ head.weight + head.bias
    norms = np.linalg.norm(z, axis=1)
    degenerate = norms < ZERO_NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms)
    s = z / safe[:, None]
    # d/dz of z/|z|: remove the radial component, scale by 1/|z|
    gz = (g - (g * s).sum(axis=1, keepdims=True) * s) / safe[:, None]
    gz[degenerate] = 0.0

    grad_w = x.T @ gz
    grad_b = gz.sum(axis=0)

    if state is None:
        vel_w = np.zeros_like(head.weight)
        vel_b = np.zeros_like(head.bias)
    else:
        vel_w = np.array(state.weight_velocity)
        vel_b = np.array(state.bias_velocity)
    vel_w = momentum * vel_w + grad_w
    vel_b = momentum * vel_b + grad_b

    new_head = ProjectionHead(
        weight=head.weight - learning_rate * vel_w,
        bias=head.bias - learning_rate * vel_b,
    )
    return new_head, SGDState(weight_velocity=vel_w, bias_velocity=vel_b)


def init_prototypes(
    representations: np.ndarray,
    labels: np.ndarray,
    labeled_mask: np.ndarray,
    known_count: int,
    class_count: int,
    rng: np.random.Generator,
    momentum: float = 0.99,
) -> PrototypeBank:
    """Known prototypes are labeled class means; novel slots come from k-means
    centroids of the unlabeled rows, picked greedily to maximize the minimum
    cosine distance to everything already chosen.
    """
    s = np.asarray(representations, dtype=float)
    y = np.asarray(labels)
    mask = np.asarray(labeled_mask, dtype=bool)
    if s.ndim != 2 or y.shape != (s.shape[0],) or mask.shape != (s.shape[0],):
        raise ValidationError("representations, labels, and mask must have matching lengths")
    if not 1 <= known_count <= class_count:
        raise ValidationError("known_count must lie in [1, class_count]")

    protos = np.zeros((class_count, s.shape[1]))
    for cls in range(known_count):
        rows = s[mask & (y == cls)]
        if rows.shape[0] == 0:
            raise ValidationError(f"no labeled samples for known class {cls}")
        protos[cls] = rows.mean(axis=0)
    protos[:known_count], _ = _normalize_rows(protos[:known_count])

    novel = class_count - known_count
    if novel == 0:
        return PrototypeBank(protos, momentum=momentum)

    unlabeled = s[~mask]
    if unlabeled.shape[0] < class_count:
        raise ValidationError("not enough unlabeled samples to seed novel prototypes")
    centroids = kmeans(unlabeled, class_count, rng, restarts=10).centroids
    candidates, _ = _normalize_rows(centroids)

    chosen = [protos[cls] for cls in range(known_count)]
    remaining = list(range(class_count))
    for slot in range(novel):
        best_idx, best_score = remaining[0], -np.inf
        for idx in remaining:
            cos = np.array([candidates[idx] @ p for p in chosen])
            score = (1.0 - cos).min()
            if score > best_score:
                best_idx, best_score = idx, score
        chosen.append(candidates[best_idx])
        protos[known_count + slot] = candidates[best_idx]
        remaining.remove(best_idx)
    return PrototypeBank(protos, momentum=momentum)
