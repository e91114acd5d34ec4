"""Hot numerical loops with numba acceleration and pure-numpy fallbacks.

Two kernels live here: the log-domain Sinkhorn potential iteration and the
Lloyd relabel/recenter iteration. Both exist in a numba ``@njit`` variant and
a vectorized numpy variant with identical semantics. The active backend is
chosen at import time: numba when available, numpy when the import fails or
the ``OTCLUST_DISABLE_NUMBA`` environment variable is set to a truthy value.

Backends are individually deterministic (fixed summation order given the same
inputs) but may differ from each other in the last few ulps; callers that need
bitwise reproducibility must stay on one backend.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


def _env_disabled() -> bool:
    return os.environ.get("OTCLUST_DISABLE_NUMBA", "").strip().lower() in {
        "1",
        "true",
        "yes",
        "on",
    }


# ---------------------------------------------------------------------------
# Sinkhorn potential iteration
# ---------------------------------------------------------------------------


def sinkhorn_potentials_numpy(log_kernel, mu, nu, max_iterations, tolerance):
    """Alternate dual updates f, g until the plan marginals meet tolerance.

    Returns (f, g, iterations_used, residual). The plan is
    exp(f[:, None] + log_kernel + g[None, :]); the residual is the max
    absolute row/column marginal violation at exit.
    """
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    f = np.zeros_like(mu)
    g = np.zeros_like(nu)
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        m = log_kernel + g[None, :]
        mx = m.max(axis=1)
        f = log_mu - (np.log(np.exp(m - mx[:, None]).sum(axis=1)) + mx)
        m = log_kernel + f[:, None]
        mx = m.max(axis=0)
        g = log_nu - (np.log(np.exp(m - mx[None, :]).sum(axis=0)) + mx)
        plan = np.exp(f[:, None] + log_kernel + g[None, :])
        row_violation = np.abs(plan.sum(axis=1) - mu).max()
        col_violation = np.abs(plan.sum(axis=0) - nu).max()
        residual = max(row_violation, col_violation)
        if residual <= tolerance:
            break
    return f, g, iterations, residual


@njit(cache=True)
def _sinkhorn_potentials_jit(log_kernel, mu, nu, max_iterations, tolerance):
    n, k = log_kernel.shape
    log_mu = np.log(mu)
    log_nu = np.log(nu)
    f = np.zeros(n)
    g = np.zeros(k)
    residual = np.inf
    iterations = 0
    row_sums = np.zeros(n)
    col_sums = np.zeros(k)
    for it in range(max_iterations):
        iterations = it + 1
        for i in range(n):
            m = -np.inf
            for j in range(k):
                v = log_kernel[i, j] + g[j]
                if v > m:
                    m = v
            s = 0.0
            for j in range(k):
                s += np.exp(log_kernel[i, j] + g[j] - m)
            f[i] = log_mu[i] - (np.log(s) + m)
        for j in range(k):
            m = -np.inf
            for i in range(n):
                v = log_kernel[i, j] + f[i]
                if v > m:
                    m = v
            s = 0.0
            for i in range(n):
                s += np.exp(log_kernel[i, j] + f[i] - m)
            g[j] = log_nu[j] - (np.log(s) + m)
        for i in range(n):
            row_sums[i] = 0.0
        for j in range(k):
            col_sums[j] = 0.0
        for i in range(n):
            for j in range(k):
                q = np.exp(f[i] + log_kernel[i, j] + g[j])
                row_sums[i] += q
                col_sums[j] += q
        residual = 0.0
        for i in range(n):
            v = abs(row_sums[i] - mu[i])
            if v > residual:
                residual = v
        for j in range(k):
            v = abs(col_sums[j] - nu[j])
            if v > residual:
                residual = v
        if residual <= tolerance:
            break
    return f, g, iterations, residual


def sinkhorn_potentials_numba(log_kernel, mu, nu, max_iterations, tolerance):
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("numba backend requested but numba is not installed")
    return _sinkhorn_potentials_jit(log_kernel, mu, nu, max_iterations, tolerance)


# ---------------------------------------------------------------------------
# Lloyd iteration
# ---------------------------------------------------------------------------


def lloyd_numpy(points, centroids, max_iterations):
    """Iterate assign/recenter from the given centroids until labels stop moving.

    Empty clusters are reseeded to the point currently farthest from its own
    centroid (scanning clusters in index order). Returns
    (labels, centroids, inertia, iterations_used).
    """
    points = np.ascontiguousarray(points)
    cents = centroids.copy()
    n = points.shape[0]
    k = cents.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        d2 = ((points[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        dist_own = d2[np.arange(n), new_labels].copy()
        for c in range(k):
            if not (new_labels == c).any():
                far = int(dist_own.argmax())
                new_labels[far] = c
                dist_own[far] = 0.0
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            cents[c] = points[labels == c].mean(axis=0)
    d2 = ((points[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), labels].sum())
    return labels, cents, inertia, iterations


@njit(cache=True)
def _lloyd_jit(points, centroids, max_iterations):
    n, d = points.shape
    k = centroids.shape[0]
    cents = centroids.copy()
    labels = np.full(n, -1, dtype=np.int64)
    new_labels = np.zeros(n, dtype=np.int64)
    dist_own = np.zeros(n)
    counts = np.zeros(k, dtype=np.int64)
    sums = np.zeros((k, d))
    iterations = 0
    for it in range(max_iterations):
        iterations = it + 1
        for i in range(n):
            best = np.inf
            arg = 0
            for c in range(k):
                s = 0.0
                for j in range(d):
                    diff = points[i, j] - cents[c, j]
                    s += diff * diff
                if s < best:
                    best = s
                    arg = c
            new_labels[i] = arg
            dist_own[i] = best
        for c in range(k):
            counts[c] = 0
        for i in range(n):
            counts[new_labels[i]] += 1
        for c in range(k):
            if counts[c] == 0:
                far = 0
                fv = -1.0
                for i in range(n):
                    if dist_own[i] > fv:
                        fv = dist_own[i]
                        far = i
                counts[new_labels[far]] -= 1
                new_labels[far] = c
                counts[c] = 1
                dist_own[far] = 0.0
        stable = True
        for i in range(n):
            if new_labels[i] != labels[i]:
                stable = False
            labels[i] = new_labels[i]
        if stable:
            break
        for c in range(k):
            for j in range(d):
                sums[c, j] = 0.0
        for i in range(n):
            c = labels[i]
            for j in range(d):
                sums[c, j] += points[i, j]
        for c in range(k):
            for j in range(d):
                cents[c, j] = sums[c, j] / counts[c]
    inertia = 0.0
    for i in range(n):
        c = labels[i]
        s = 0.0
        for j in range(d):
            diff = points[i, j] - cents[c, j]
            s += diff * diff
        inertia += s
    return labels, cents, inertia, iterations


def lloyd_numba(points, centroids, max_iterations):
    if not HAVE_NUMBA:  # pragma: no cover
        raise RuntimeError("numba backend requested but numba is not installed")
    points = np.ascontiguousarray(points)
    return _lloyd_jit(points, centroids.copy(), max_iterations)


# ---------------------------------------------------------------------------
# Backend dispatch
# ---------------------------------------------------------------------------

if HAVE_NUMBA and not _env_disabled():
    BACKEND = "numba"
    sinkhorn_potentials = sinkhorn_potentials_numba
    lloyd = lloyd_numba
else:
    BACKEND = "numpy"
    sinkhorn_potentials = sinkhorn_potentials_numpy
    lloyd = lloyd_numpy


def active_backend() -> str:
    """Name of the backend selected at import time."""
    return BACKEND
