import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from otclust.errors import ValidationError
from otclust.transport import (
    ClassPrior,
    CostMatrix,
    SinkhornConfig,
    cost_from_predictions,
    entropic_objective,
    estep,
    exact_entropic_oracle,
    extract_pseudo_labels,
    sinkhorn_solve,
    uniform_prior,
    update_class_prior,
)


def softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def random_instance(rng, n, k, cost_hi=3.0):
    cost = CostMatrix(cost_hi * rng.random((n, k)))
    mu = rng.random(n) + 0.1
    nu = rng.random(k) + 0.1
    return cost, mu / mu.sum(), nu / nu.sum()


def separated_square_cost(rng, n):
    # one clearly cheapest column per row, arranged as a permutation
    perm = rng.permutation(n)
    c = 1.5 + 0.1 * rng.random((n, n))
    c[np.arange(n), perm] = 1.0 + 0.05 * rng.random(n)
    return CostMatrix(c), perm


# ---------------------------------------------------------------------------
# reference solver
# ---------------------------------------------------------------------------


def test_oracle_uniform_cost_is_product_measure():
    cost = CostMatrix(np.ones((2, 2)))
    plan = exact_entropic_oracle(cost, np.full(2, 0.5), np.full(2, 0.5), eta=1.0)
    assert np.allclose(plan.values, 0.25, atol=1e-12)
    assert plan.marginal_residual <= 1e-14


def test_oracle_huge_entropy_weight_approaches_outer_product():
    rng = np.random.default_rng(3)
    cost = CostMatrix(0.002 * rng.random((6, 5)))
    mu = rng.random(6) + 0.1
    mu /= mu.sum()
    nu = rng.random(5) + 0.1
    nu /= nu.sum()
    plan = exact_entropic_oracle(cost, mu, nu, eta=100.0)
    assert np.abs(plan.values - np.outer(mu, nu)).max() <= 1e-6


def test_oracle_tracks_assignment_optimum_at_tiny_entropy():
    rng = np.random.default_rng(42)
    cost, perm = separated_square_cost(rng, 8)
    uniform = np.full(8, 1 / 8)
    plan = exact_entropic_oracle(cost, uniform, uniform, eta=1e-3)
    rows, cols = linear_sum_assignment(cost.values)
    optimum = cost.values[rows, cols].sum() / 8
    transported = (plan.values * cost.values).sum()
    assert abs(transported - optimum) <= 0.01 * optimum
    assert (plan.values.argmax(axis=1) == perm).all()


def test_oracle_meets_marginals_and_mass():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 25))
        k = int(rng.integers(2, 9))
        cost, mu, nu = random_instance(rng, n, k)
        plan = exact_entropic_oracle(cost, mu, nu, eta=0.1)
        assert plan.marginal_residual <= 1e-14
        assert (plan.values >= 0).all()
        assert abs(plan.values.sum() - 1.0) <= 1e-9
        assert np.abs(plan.values.sum(axis=1) - mu).max() <= 1e-14
        assert np.abs(plan.values.sum(axis=0) - nu).max() <= 1e-14


def test_oracle_handles_zero_marginal_entries():
    rng = np.random.default_rng(3)
    cost, mu, _ = random_instance(rng, 6, 5)
    nu = np.array([0.4, 0.6, 0.0, 0.0, 0.0])
    plan = exact_entropic_oracle(cost, mu, nu, eta=0.5)
    assert plan.values[:, 2:].sum() == 0.0
    assert plan.marginal_residual <= 1e-14


def test_oracle_rejects_oversized_instance():
    cost = CostMatrix(np.ones((101, 100)))
    mu = np.full(101, 1 / 101)
    nu = np.full(100, 1 / 100)
    with pytest.raises(ValidationError):
        exact_entropic_oracle(cost, mu, nu, eta=0.5)


def test_oracle_rejects_bad_marginals():
    cost = CostMatrix(np.ones((3, 2)))
    with pytest.raises(ValidationError):
        exact_entropic_oracle(cost, np.full(4, 0.25), np.full(2, 0.5), eta=0.5)
    with pytest.raises(ValidationError):
        exact_entropic_oracle(cost, np.array([0.8, 0.4, -0.2]), np.full(2, 0.5), eta=0.5)
    with pytest.raises(ValidationError):
        exact_entropic_oracle(cost, np.full(3, 1 / 3), np.array([0.9, 0.9]), eta=0.5)


# ---------------------------------------------------------------------------
# cost construction
# ---------------------------------------------------------------------------


def test_cost_certain_prediction_hits_clamp_floor():
    cost = cost_from_predictions(np.array([[1.0, 0.0]]))
    assert cost.values[0, 0] == 0.0
    assert np.isclose(cost.values[0, 1], -np.log(1e-12))


def test_cost_uniform_row_is_log_two():
    cost = cost_from_predictions(np.array([[0.5, 0.5]]))
    assert np.allclose(cost.values, np.log(2.0))


def test_cost_matches_negative_log():
    cost = cost_from_predictions(np.array([[0.9, 0.1]]))
    assert np.allclose(cost.values, [-np.log(0.9), -np.log(0.1)])
    assert np.allclose(cost.values, [0.10536, 2.30259], atol=1e-5)


def test_cost_rejects_bad_rows():
    with pytest.raises(ValidationError):
        cost_from_predictions(np.array([[0.5, np.nan]]))
    with pytest.raises(ValidationError):
        cost_from_predictions(np.array([[0.7, 0.7]]))
    with pytest.raises(ValidationError):
        cost_from_predictions(np.array([[1.2, -0.2]]))
    with pytest.raises(ValidationError):
        cost_from_predictions(np.array([0.5, 0.5]))


def test_cost_matrix_rejects_nonfinite_and_negative():
    with pytest.raises(ValidationError):
        CostMatrix(np.array([[1.0, np.inf]]))
    with pytest.raises(ValidationError):
        CostMatrix(np.array([[-0.5, 1.0]]))


# ---------------------------------------------------------------------------
# production solver
# ---------------------------------------------------------------------------


def test_sinkhorn_uniform_two_by_two_is_product_measure():
    cost = CostMatrix(np.ones((2, 2)))
    plan = sinkhorn_solve(cost, np.full(2, 0.5), np.full(2, 0.5), SinkhornConfig())
    assert np.allclose(plan.values, 0.25, atol=1e-9)
    assert plan.converged


def test_sinkhorn_strong_diagonal_matches_oracle():
    cost = CostMatrix(np.array([[0.0, 10.0], [10.0, 0.0]]))
    uniform = np.full(2, 0.5)
    config = SinkhornConfig(eta=0.05, max_iterations=10000, tolerance=1e-12)
    plan = sinkhorn_solve(cost, uniform, uniform, config)
    assert plan.values[0, 1] < 1e-8 and plan.values[1, 0] < 1e-8
    reference = exact_entropic_oracle(cost, uniform, uniform, eta=0.05)
    assert np.abs(plan.values - reference.values).max() <= 1e-8


def test_sinkhorn_matches_oracle_on_seeded_instance():
    rng = np.random.default_rng(11)
    cost, mu, nu = random_instance(rng, 10, 4)
    config = SinkhornConfig(eta=0.05, max_iterations=50000, tolerance=1e-12)
    plan = sinkhorn_solve(cost, mu, nu, config)
    reference = exact_entropic_oracle(cost, mu, nu, eta=0.05)
    assert np.abs(plan.values - reference.values).max() <= 1e-8
    assert (extract_pseudo_labels(plan) == reference.values.argmax(axis=1)).all()


def test_sinkhorn_oracle_agreement_sweep():
    sizes = [(5, 4), (12, 8), (25, 12)]
    for eta in (0.01, 0.05, 0.5, 5.0):
        for seed, (n, k) in enumerate(sizes):
            rng = np.random.default_rng(100 * seed + 7)
            cost, mu, nu = random_instance(rng, n, k)
            config = SinkhornConfig(eta=eta, max_iterations=200000, tolerance=1e-12)
            plan = sinkhorn_solve(cost, mu, nu, config)
            reference = exact_entropic_oracle(cost, mu, nu, eta=eta)
            assert plan.converged
            assert np.abs(plan.values - reference.values).max() <= 1e-8


def test_sinkhorn_objective_agrees_with_oracle():
    rng = np.random.default_rng(5)
    cost, mu, nu = random_instance(rng, 15, 6)
    config = SinkhornConfig(eta=0.1, max_iterations=50000, tolerance=1e-12)
    plan = sinkhorn_solve(cost, mu, nu, config)
    reference = exact_entropic_oracle(cost, mu, nu, eta=0.1)
    ours = entropic_objective(plan.values, cost.values, 0.1)
    ref = entropic_objective(reference.values, cost.values, 0.1)
    assert abs(ours - ref) <= 1e-10


def test_sinkhorn_feasibility_sweep():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 30))
        k = int(rng.integers(2, 8))
        cost, mu, nu = random_instance(rng, n, k)
        eta = float(rng.choice([0.02, 0.05, 0.2]))
        config = SinkhornConfig(eta=eta, max_iterations=50000, tolerance=1e-8)
        plan = sinkhorn_solve(cost, mu, nu, config)
        assert plan.converged
        assert plan.marginal_residual <= config.tolerance
        assert (plan.values >= 0).all()
        assert abs(plan.values.sum() - 1.0) <= 1e-9
        assert np.abs(plan.values.sum(axis=1) - plan.row_marginal).max() <= config.tolerance
        assert np.abs(plan.values.sum(axis=0) - plan.col_marginal).max() <= config.tolerance


def test_sinkhorn_flags_nonconvergence_without_raising():
    rng = np.random.default_rng(8)
    cost, mu, nu = random_instance(rng, 20, 10)
    config = SinkhornConfig(eta=0.01, max_iterations=1, tolerance=1e-13)
    plan = sinkhorn_solve(cost, mu, nu, config)
    assert not plan.converged
    assert plan.marginal_residual > config.tolerance
    assert plan.iterations == 1


def test_sinkhorn_debug_dual_is_nondecreasing():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cost, mu, nu = random_instance(rng, 12, 5)
        config = SinkhornConfig(eta=0.05, max_iterations=20000, tolerance=1e-10)
        plan = sinkhorn_solve(cost, mu, nu, config, debug=True)
        dual = np.asarray(plan.dual_trace)
        assert len(dual) == plan.iterations
        assert (np.diff(dual) >= -1e-9).all()
        assert plan.residual_trace[-1] == plan.marginal_residual
        quiet = sinkhorn_solve(cost, mu, nu, config)
        assert quiet.dual_trace is None and quiet.residual_trace is None


def test_sinkhorn_validates_inputs():
    cost = CostMatrix(np.ones((3, 2)))
    config = SinkhornConfig()
    with pytest.raises(ValidationError):
        sinkhorn_solve(cost, np.full(2, 0.5), np.full(2, 0.5), config)
    with pytest.raises(ValidationError):
        sinkhorn_solve(cost, np.full(3, 1 / 3), np.array([1.4, -0.4]), config)
    with pytest.raises(ValidationError):
        SinkhornConfig(eta=0.0)
    with pytest.raises(ValidationError):
        SinkhornConfig(max_iterations=0)
    with pytest.raises(ValidationError):
        SinkhornConfig(tolerance=-1e-8)


def test_sinkhorn_square_tiny_entropy_recovers_matching():
    rng = np.random.default_rng(42)
    cost, perm = separated_square_cost(rng, 8)
    uniform = np.full(8, 1 / 8)
    config = SinkhornConfig(eta=1e-3, max_iterations=50000, tolerance=1e-12)
    plan = sinkhorn_solve(cost, uniform, uniform, config)
    labels = extract_pseudo_labels(plan)
    assert (labels == perm).all()
    assert sorted(labels) == list(range(8))

    # rectangular variant: three clear preferrers per class
    rng = np.random.default_rng(7)
    n, k = 12, 4
    c = 1.5 + 0.3 * rng.random((n, k))
    pref = np.repeat(np.arange(k), 3)
    c[np.arange(n), pref] = 1.0 + 0.05 * rng.random(n)
    plan = sinkhorn_solve(
        CostMatrix(c), np.full(n, 1 / n), np.full(k, 1 / k), config
    )
    labels = extract_pseudo_labels(plan)
    assert (np.bincount(labels, minlength=k) == 3).all()
    assert (labels == pref).all()


# ---------------------------------------------------------------------------
# pseudo-label extraction
# ---------------------------------------------------------------------------


def test_extract_argmax_and_tie_break():
    cost = CostMatrix(np.zeros((2, 2)))
    plan = sinkhorn_solve(cost, np.full(2, 0.5), np.full(2, 0.5), SinkhornConfig())
    values = np.array([[0.5, 0.0], [0.0, 0.5]])
    forged = type(plan)(
        values=values,
        row_marginal=np.full(2, 0.5),
        col_marginal=np.full(2, 0.5),
        marginal_residual=0.0,
        converged=True,
        iterations=1,
    )
    assert extract_pseudo_labels(forged).tolist() == [0, 1]
    tie = type(plan)(
        values=np.array([[0.25, 0.25]]),
        row_marginal=np.array([1.0]),
        col_marginal=np.full(2, 0.5),
        marginal_residual=0.0,
        converged=True,
        iterations=1,
    )
    assert extract_pseudo_labels(tie).tolist() == [0]


# ---------------------------------------------------------------------------
# class prior
# ---------------------------------------------------------------------------


def test_prior_update_moves_toward_argmax_histogram():
    prior = ClassPrior(beta=np.array([0.5, 0.5]), momentum=0.95)
    predictions = np.tile([0.8, 0.2], (10, 1))
    updated = update_class_prior(prior, predictions)
    assert np.allclose(updated.beta, [0.525, 0.475], atol=1e-12)
    assert updated.momentum == prior.momentum


def test_prior_update_identity_and_replacement():
    predictions = np.array([[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.1, 0.9]])
    frozen = update_class_prior(ClassPrior(np.array([0.3, 0.7]), momentum=1.0), predictions)
    assert np.allclose(frozen.beta, [0.3, 0.7], atol=1e-12)
    replaced = update_class_prior(ClassPrior(np.array([0.3, 0.7]), momentum=0.0), predictions)
    assert np.allclose(replaced.beta, [0.25, 0.75], atol=1e-12)


def test_prior_stays_on_simplex_under_random_streams():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 12))
        prior = uniform_prior(k, momentum=float(rng.uniform(0.0, 1.0)))
        for _ in range(40):
            predictions = softmax_rows(rng.normal(0, 2, (int(rng.integers(1, 50)), k)))
            prior = update_class_prior(prior, predictions)
            assert (prior.beta >= 0).all()
            assert abs(prior.beta.sum() - 1.0) <= 1e-9


def test_prior_validation():
    with pytest.raises(ValidationError):
        ClassPrior(beta=np.array([0.7, 0.7]))
    with pytest.raises(ValidationError):
        ClassPrior(beta=np.array([1.5, -0.5]))
    with pytest.raises(ValidationError):
        ClassPrior(beta=np.array([0.5, 0.5]), momentum=1.5)
    with pytest.raises(ValidationError):
        uniform_prior(0)


# ---------------------------------------------------------------------------
# full E-step
# ---------------------------------------------------------------------------


def test_estep_uniform_inputs_tie_break_to_class_zero():
    predictions = np.full((10, 4), 0.25)
    plan, labels, prior = estep(predictions, uniform_prior(4), SinkhornConfig())
    assert labels.tolist() == [0] * 10
    # every argmax lands on class 0, so the updated prior tilts that way
    expected_beta = 0.95 * np.full(4, 0.25) + 0.05 * np.array([1.0, 0, 0, 0])
    assert np.allclose(prior.beta, expected_beta / expected_beta.sum(), atol=1e-12)
    assert np.allclose(plan.values, np.outer(np.full(10, 0.1), prior.beta), atol=1e-8)


def test_estep_one_hot_balanced_predictions_recover_argmax():
    one_hot = np.tile(np.eye(4), (3, 1))
    plan, labels, prior = estep(one_hot, uniform_prior(4), SinkhornConfig())
    assert (labels == one_hot.argmax(axis=1)).all()
    assert np.allclose(prior.beta, 0.25, atol=1e-12)
    assert plan.converged


def test_estep_corrects_skewed_predictions():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, k = 200, 10
        truth = np.repeat(np.arange(k), n // k)
        logits = 2.0 * np.eye(k)[truth] + rng.normal(0, 1.0, (n, k))
        logits[:, 0] += 1.5
        predictions = softmax_rows(logits)
        argmax_accuracy = (predictions.argmax(axis=1) == truth).mean()
        config = SinkhornConfig(eta=0.05, max_iterations=20000, tolerance=1e-9)
        _, labels, _ = estep(predictions, uniform_prior(k), config)
        ot_accuracy = (labels == truth).mean()
        assert ot_accuracy > argmax_accuracy + 0.02


def test_estep_returns_updated_prior_and_uses_it():
    rng = np.random.default_rng(4)
    predictions = softmax_rows(rng.normal(0, 1, (40, 5)))
    prior = uniform_prior(5, momentum=0.9)
    plan, _, updated = estep(predictions, prior, SinkhornConfig())
    histogram = np.bincount(predictions.argmax(axis=1), minlength=5) / 40
    expected = 0.9 * prior.beta + 0.1 * histogram
    assert np.allclose(updated.beta, expected / expected.sum(), atol=1e-12)
    assert np.array_equal(plan.col_marginal, updated.beta)
    assert np.allclose(plan.row_marginal, 1 / 40)


def test_scaled_then_renormalized_predictions_keep_labels():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        predictions = softmax_rows(rng.normal(0, 1.5, (30, 6)))
        config = SinkhornConfig(eta=0.05, max_iterations=20000, tolerance=1e-10)
        _, labels, _ = estep(predictions, uniform_prior(6), config)
        scale = float(rng.uniform(0.1, 10.0))
        scaled = predictions * scale
        scaled /= scaled.sum(axis=1, keepdims=True)
        _, labels_scaled, _ = estep(scaled, uniform_prior(6), config)
        assert (labels == labels_scaled).all()
