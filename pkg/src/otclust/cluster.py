"""K-means with k-means++ seeding, restarts, and deterministic tie-breaking."""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from . import kernels


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Sample k starting centroids, each weighted by squared distance cover."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on already-chosen points
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points,
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
    max_iterations: int = 300,
) -> KMeansResult:
    """Best-of-restarts Lloyd clustering; lowest inertia wins, first on ties."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValidationError("points must be an N x D matrix")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points must be finite")
    if k < 1:
        raise ValidationError("k must be at least 1")
    if pts.shape[0] < k:
        raise ValidationError(f"need at least k={k} points, got {pts.shape[0]}")
    if restarts < 1:
        raise ValidationError("restarts must be at least 1")

    pts = np.ascontiguousarray(pts)
    best = None
    for _ in range(restarts):
        seeds = plus_plus_init(pts, k, rng)
        labels, centroids, inertia, _ = kernels.lloyd(pts, seeds, max_iterations)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels=labels, centroids=centroids, inertia=inertia)
    return best
