import logging
import math

import numpy as np
import pytest

from caprec.core import ContextVectors, LatentModel, RatingsDataset, TrainConfig
from caprec.objective import (
    accuracy_term,
    bpr_pairs,
    capacity_term,
    expected_usage,
    objective_value,
    regularization,
    surrogate_derivative,
    surrogate_loss,
)
from helpers import random_context, random_model, random_signed


def _scalar_model(scores):
    """k=1 model whose score matrix equals ``scores`` (a single user row)."""
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    return LatentModel(np.ones((1, s.shape[0])), s[:1].copy())


def test_expected_usage_examples():
    zero = LatentModel(np.zeros((2, 10)), np.zeros((2, 3)))
    assert expected_usage(zero, np.zeros(10), 0) == 0.0
    assert expected_usage(zero, np.ones(10), 1) == 5.0
    # two users with scores 0 and 2 on one item
    m = LatentModel(np.array([[0.0, 1.0]]), np.array([[2.0]]))
    m.U[0, 0] = 0.0
    assert expected_usage(m, np.array([0.5, 1.0]), 0) == pytest.approx(0.5 * 0.5 + 0.8807970779778823, abs=1e-12)
    np.testing.assert_allclose(expected_usage(zero, np.ones(10)), [5.0, 5.0, 5.0])
    with pytest.raises(ValueError):
        expected_usage(zero, np.ones(3))


def test_surrogate_values():
    assert surrogate_loss("logistic", 0.0) == pytest.approx(math.log(2), rel=1e-15)
    assert surrogate_loss("hinge", 2.0) == 0.0
    assert surrogate_loss("exponential", -1.0) == pytest.approx(math.e, rel=1e-15)
    assert surrogate_loss("exponential", -701.0) == math.inf
    assert surrogate_derivative("hinge", 0.0) == 0.0
    assert surrogate_derivative("hinge", -0.1) == -1.0
    with pytest.raises(ValueError):
        surrogate_loss("square", 0.0)


def test_surrogate_derivatives_match_differences(rng):
    d = rng.uniform(-20, 20, 200)
    h = 1e-6
    for kind in ["logistic", "exponential", "hinge"]:
        fd = (surrogate_loss(kind, d + h) - surrogate_loss(kind, d - h)) / (2 * h)
        np.testing.assert_allclose(surrogate_derivative(kind, d), fd, rtol=1e-6, atol=1e-8)


def test_capacity_term_examples():
    m = LatentModel(np.zeros((1, 3)), np.zeros((1, 2)))
    slack = ContextVectors(np.ones(3), np.full(2, 1.5 + 50))
    assert capacity_term(m, slack, "logistic") < 1e-20
    one = LatentModel(np.zeros((1, 2)), np.zeros((1, 1)))
    assert capacity_term(one, ContextVectors(np.ones(2), np.array([1.0])), "logistic") == pytest.approx(math.log(2))
    # usage 1 per item with two users at p=1; capacities 0 and 4 give deltas (-1, 3)
    two = LatentModel(np.zeros((1, 2)), np.zeros((1, 2)))
    ctx = ContextVectors(np.ones(2), np.array([1e-300, 4.0]))
    assert capacity_term(two, ctx, "hinge") == pytest.approx(0.5)


def test_accuracy_term_examples():
    d = RatingsDataset.from_triples([(0, 0, 1.0), (0, 1, -1.0)], 1, 2, feedback_mode="explicit±1")
    m = LatentModel(np.array([[1.0]]), np.array([[0.5, -0.25]]))
    assert accuracy_term(m, d, "square") == pytest.approx(0.8125, abs=1e-15)
    perfect = LatentModel(np.array([[1.0]]), np.array([[1.0, -1.0]]))
    assert accuracy_term(perfect, d, "square") == 0.0
    tie = LatentModel(np.array([[0.0]]), np.array([[0.3, 0.7]]))
    assert accuracy_term(tie, d, "bpr") == pytest.approx(math.log(2), rel=1e-15)


def test_bpr_brute_force(rng):
    d = random_signed(rng, 5, 7)
    m = random_model(rng, 5, 7, 2)
    s = m.scores()
    ref = 0.0
    for i in range(5):
        for k in d.positives(i):
            for j in d.negatives(i):
                ref += math.log1p(math.exp(-(s[i, k] - s[i, j])))
    assert accuracy_term(m, d, "bpr") == pytest.approx(ref, rel=1e-13)


def test_bpr_pairs_subsample_and_warning(rng, caplog):
    d = random_signed(rng, 4, 12, density=0.9)
    full = bpr_pairs(d)
    sub = bpr_pairs(d, max_pairs_per_user=3, seed=1)
    assert len(sub[0]) == 3 * 4
    full_set = set(zip(*[a.tolist() for a in full]))
    assert set(zip(*[a.tolist() for a in sub])) <= full_set
    only_pos = RatingsDataset.from_triples([(0, 0, 1.0), (1, 0, 1.0), (1, 1, -1.0)], 2, 2, feedback_mode="explicit±1")
    with caplog.at_level(logging.WARNING):
        u, _, _ = bpr_pairs(only_pos)
    assert u.tolist() == [1]
    assert "lack positives or negatives" in caplog.text


def test_objective_scalar_composition():
    d = RatingsDataset.from_triples([(0, 0, 1.0)], 1, 1, feedback_mode="implicit01")
    m = LatentModel(np.zeros((1, 1)), np.zeros((1, 1)))
    ctx = ContextVectors(np.ones(1), np.ones(1))
    cap = math.log1p(math.exp(0.5 - 1.0))
    assert cap == pytest.approx(0.47408, abs=1e-5)
    for alpha in [0.1, 0.5, 0.9]:
        ob = objective_value(m, d, ctx, TrainConfig(alpha=alpha, lam=0.0, rank=1))
        assert ob.total == pytest.approx((1 - alpha) + alpha * cap, rel=1e-14)


def test_objective_alpha_endpoints(rng):
    d = random_signed(rng, 6, 8)
    m = random_model(rng, 6, 8, 3)
    ctx = random_context(rng, m)
    base = objective_value(m, d, None, TrainConfig(alpha=0.0, lam=0.01, rank=3))
    with_ctx = objective_value(m, d, ctx, TrainConfig(alpha=0.0, lam=0.01, rank=3))
    assert base.total == with_ctx.total == accuracy_term(m, d) + 0.01 * regularization(m)
    assert with_ctx.capacity_term == 0.0
    only = objective_value(m, d, ctx, TrainConfig(alpha=1.0, lam=0.01, rank=3))
    assert only.total == capacity_term(m, ctx) + 0.01 * regularization(m)
    assert only.accuracy_term > 0
    with pytest.raises(ValueError):
        objective_value(m, d, None, TrainConfig(alpha=0.5, rank=3))


def test_regularization_skips_fixed_influence(rng):
    m = random_model(rng, 3, 4, 2, L=5)
    expected = (m.U ** 2).sum() + (m.V ** 2).sum() + (m.X ** 2).sum()
    assert regularization(m) == pytest.approx(expected, rel=1e-14)
