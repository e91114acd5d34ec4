"""Entropy-regularized optimal transport for pseudo-label assignment.

Predicted class probabilities become a cost matrix (negative log), a
Sinkhorn-Knopp solver couples the empirical sample distribution to a running
class prior, and row argmaxes of the resulting plan are the pseudo-labels.

Two solvers exist on purpose. ``sinkhorn_solve`` is the production path
(potential iteration, backed by the kernels module). ``exact_entropic_oracle``
is a deliberately separate full-matrix iterative-proportional-fitting routine
run to near machine precision; tests compare the two and they must never share
code.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError
from . import kernels

PROBABILITY_FLOOR = 1e-12


@dataclass(frozen=True)
class CostMatrix:
    """Nonnegative finite costs, one row per sample and one column per class."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError("cost matrix must be 2-dimensional")
        if not np.all(np.isfinite(v)):
            raise ValidationError("cost matrix entries must be finite")
        if (v < 0).any():
            raise ValidationError("cost matrix entries must be nonnegative")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling between samples and classes plus the achieved feasibility.

    marginal_residual is the max absolute row/column marginal violation at
    termination; converged reports whether it met the requested tolerance.
    """

    values: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    marginal_residual: float
    converged: bool
    iterations: int
    residual_trace: Optional[list] = field(default=None, repr=False)
    dual_trace: Optional[list] = field(default=None, repr=False)


@dataclass(frozen=True)
class ClassPrior:
    """Moving-average estimate of the class distribution over unlabeled data."""

    beta: np.ndarray
    momentum: float = 0.95

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1:
            raise ValidationError("class prior must be a vector")
        if (b < 0).any():
            raise ValidationError("class prior entries must be nonnegative")
        if abs(b.sum() - 1.0) > 1e-9:
            raise ValidationError("class prior must sum to 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("prior momentum must lie in [0, 1]")
        object.__setattr__(self, "beta", b)


def uniform_prior(class_count: int, momentum: float = 0.95) -> ClassPrior:
    if class_count < 1:
        raise ValidationError("class_count must be positive")
    return ClassPrior(beta=np.full(class_count, 1.0 / class_count), momentum=momentum)


@dataclass(frozen=True)
class SinkhornConfig:
    eta: float = 0.05
    max_iterations: int = 2000
    tolerance: float = 1e-8

    def __post_init__(self):
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ValidationError("tolerance must be positive")


def _as_row_stochastic(predictions) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim != 2:
        raise ValidationError("predictions must be an N x K matrix")
    if np.isnan(p).any():
        raise ValidationError("predictions contain NaN")
    # tiny slack: rows produced by softmax can round a hair outside [0, 1]
    if (p < -1e-9).any() or (p > 1.0 + 1e-9).any():
        raise ValidationError("prediction entries must lie in [0, 1]")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("prediction rows must sum to 1")
    return p


def _as_marginal(v, length: int, name: str) -> np.ndarray:
    m = np.asarray(v, dtype=np.float64)
    if m.shape != (length,):
        raise ValidationError(f"{name} has wrong shape {m.shape}, expected ({length},)")
    if (m < 0).any():
        raise ValidationError(f"{name} entries must be nonnegative")
    if abs(m.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} must sum to 1")
    return m


def cost_from_predictions(predictions) -> CostMatrix:
    """Turn row-stochastic predictions into costs via -log, floored at 1e-12."""
    p = _as_row_stochastic(predictions)
    return CostMatrix(values=-np.log(np.maximum(p, PROBABILITY_FLOOR)))


def entropic_objective(plan_values: np.ndarray, cost_values: np.ndarray, eta: float) -> float:
    """<Q, C> + eta * sum(Q log Q), with 0 log 0 taken as 0."""
    q = np.asarray(plan_values, dtype=np.float64)
    mask = q > 0
    entropy_term = float((q[mask] * np.log(q[mask])).sum())
    return float((q * cost_values).sum()) + eta * entropy_term


_ORACLE_RESIDUAL = 1e-14
_ORACLE_SAFETY_CAP = 1_000_000


def exact_entropic_oracle(cost: CostMatrix, mu, nu, eta: float) -> TransportPlan:
    """Reference solver: full-matrix log-domain proportional fitting.

    Alternately rescales rows then columns of the dense log-plan until the
    marginal residual drops below 1e-14. Slow and memory-heavy by design;
    restricted to N*K <= 10,000.
    """
    if not eta > 0:
        raise ValidationError("eta must be positive")
    c = cost.values
    n, k = c.shape
    if n * k > 10_000:
        raise ValidationError("oracle instance too large (N*K must be <= 10,000)")
    mu = _as_marginal(mu, n, "mu")
    nu = _as_marginal(nu, k, "nu")

    log_plan = -c / eta
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    row_live = mu > 0
    col_live = nu > 0
    log_plan[~row_live, :] = -np.inf
    log_plan[:, ~col_live] = -np.inf

    iterations = 0
    while True:
        iterations += 1
        row_lse = logsumexp(log_plan[row_live], axis=1)
        log_plan[row_live] += (log_mu[row_live] - row_lse)[:, None]
        col_lse = logsumexp(log_plan[:, col_live], axis=0)
        log_plan[:, col_live] += (log_nu[col_live] - col_lse)[None, :]

        plan = np.exp(log_plan)
        residual = max(
            np.abs(plan.sum(axis=1) - mu).max(),
            np.abs(plan.sum(axis=0) - nu).max(),
        )
        if residual <= _ORACLE_RESIDUAL:
            break
        if iterations >= _ORACLE_SAFETY_CAP:
            raise NumericalError(
                f"oracle failed to reach residual {_ORACLE_RESIDUAL} "
                f"after {iterations} iterations (stuck at {residual:.3e})"
            )
    if np.isnan(plan).any():
        raise NumericalError("oracle produced NaN entries")
    return TransportPlan(
        values=plan,
        row_marginal=mu,
        col_marginal=nu,
        marginal_residual=float(residual),
        converged=True,
        iterations=iterations,
    )


def _potentials_with_traces(log_kernel, mu, nu, max_iterations, tolerance):
    """Numpy potential iteration that also records residual and dual traces."""
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)
    f = np.zeros_like(mu)
    g = np.zeros_like(nu)
    residual_trace = []
    dual_trace = []
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
        residual = max(
            np.abs(plan.sum(axis=1) - mu).max(),
            np.abs(plan.sum(axis=0) - nu).max(),
        )
        residual_trace.append(float(residual))
        dual_trace.append(float(f @ mu + g @ nu - plan.sum()))
        if residual <= tolerance:
            break
    return f, g, iterations, residual, residual_trace, dual_trace


def sinkhorn_solve(
    cost: CostMatrix, mu, nu, config: SinkhornConfig, debug: bool = False
) -> TransportPlan:
    """Couple mu to nu against the cost by log-domain alternating scaling.

    Stops when the marginal residual drops below config.tolerance or the
    iteration budget runs out; the latter is reported via converged=False
    rather than raised. NaN or overflow in the plan is fatal.

    debug=True additionally records per-iteration residual and dual-objective
    traces (the dual must be nondecreasing; it is a block-coordinate ascent).
    """
    c = cost.values
    n, k = c.shape
    mu = _as_marginal(mu, n, "mu")
    nu = _as_marginal(nu, k, "nu")
    log_kernel = -c / config.eta

    residual_trace = None
    dual_trace = None
    if debug:
        f, g, iterations, _, residual_trace, raw_dual = _potentials_with_traces(
            log_kernel, mu, nu, config.max_iterations, config.tolerance
        )
        dual_trace = [config.eta * d for d in raw_dual]
    else:
        f, g, iterations, _ = kernels.sinkhorn_potentials(
            log_kernel, mu, nu, config.max_iterations, config.tolerance
        )

    plan = np.exp(f[:, None] + log_kernel + g[None, :])
    if np.isnan(plan).any() or np.isinf(plan).any():
        raise NumericalError("transport plan scaling produced NaN or overflow")
    residual = float(
        max(np.abs(plan.sum(axis=1) - mu).max(), np.abs(plan.sum(axis=0) - nu).max())
    )
    if debug and residual_trace:
        residual_trace[-1] = residual
    return TransportPlan(
        values=plan,
        row_marginal=mu,
        col_marginal=nu,
        marginal_residual=residual,
        converged=residual <= config.tolerance,
        iterations=iterations,
        residual_trace=residual_trace,
        dual_trace=dual_trace,
    )


def extract_pseudo_labels(plan: TransportPlan) -> np.ndarray:
    """Row argmaxes of the plan; ties resolve to the lowest class id."""
    return plan.values.argmax(axis=1)


def update_class_prior(prior: ClassPrior, predictions) -> ClassPrior:
    """Blend the prior toward the argmax histogram of the predictions."""
    p = _as_row_stochastic(predictions)
    if p.shape[1] != prior.beta.shape[0]:
        raise ValidationError("prediction width does not match prior length")
    histogram = np.bincount(p.argmax(axis=1), minlength=p.shape[1]) / p.shape[0]
    blended = prior.momentum * prior.beta + (1.0 - prior.momentum) * histogram
    return ClassPrior(beta=blended / blended.sum(), momentum=prior.momentum)


def estep(predictions, prior: ClassPrior, config: SinkhornConfig, debug: bool = False):
    """One pseudo-labeling pass over unlabeled predictions.

    Updates the class prior from the predictions, builds the negative-log
    cost, couples the uniform sample distribution to the updated prior, and
    reads labels off the plan. Returns (plan, labels, updated prior).
    """
    p = _as_row_stochastic(predictions)
    updated = update_class_prior(prior, p)
    cost = cost_from_predictions(p)
    mu = np.full(p.shape[0], 1.0 / p.shape[0])
    plan = sinkhorn_solve(cost, mu, updated.beta, config, debug=debug)
    return plan, extract_pseudo_labels(plan), updated
