import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupfl import models
from groupfl.errors import DomainError, InvariantError, ShapeError


def fd_gradient(spec, w, X, y, h=1e-6):
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (models.loss(spec, w + e, X, y) - models.loss(spec, w - e, X, y)) / (2 * h)
    return g


def scalar_cross_entropy(W, b, X, y):
    """Independent loop-based softmax cross-entropy."""
    total = 0.0
    for x, label in zip(X, y):
        z = [sum(x[i] * W[i][c] for i in range(len(x))) + b[c] for c in range(len(b))]
        top = max(z)
        log_norm = top + math.log(sum(math.exp(v - top) for v in z))
        total += log_norm - z[label]
    return total / len(y)


def test_param_counts():
    assert models.softmax_regression(20, 10).param_count == 21 * 10
    assert models.mlp(20, 10, hidden_units=7).param_count == 21 * 7 + 8 * 10


def test_zero_weights_give_log_num_classes():
    spec = models.softmax_regression(5, 10)
    X = np.random.default_rng(0).standard_normal((7, 5))
    assert models.loss(spec, np.zeros(spec.param_count), X, np.arange(7)) == pytest.approx(math.log(10), abs=1e-12)


def test_saturated_correct_logits_give_zero_loss_and_full_accuracy():
    spec = models.softmax_regression(1, 2)
    w = np.array([0.0, 0.0, -500.0, 500.0])  # bias pushes class 1 by +1000
    X = np.ones((3, 1))
    y = np.ones(3, dtype=int)
    assert models.loss(spec, w, X, y) < 1e-12
    assert models.accuracy(spec, w, X, y) == 1.0


def test_loss_matches_scalar_oracle():
    spec = models.softmax_regression(2, 3)
    W = [[0.1, -0.2, 0.3], [0.05, 0.4, -0.1]]
    b = [0.0, 0.1, -0.05]
    w = np.array(W).ravel().tolist() + b
    X = [[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7], [2.0, 2.0]]
    y = [0, 2, 1, 1]
    assert models.loss(spec, np.array(w), np.array(X), np.array(y)) == pytest.approx(
        scalar_cross_entropy(W, b, X, y), abs=1e-12)


def test_bias_gradient_at_zero_is_uniform_minus_onehot():
    spec = models.softmax_regression(3, 4)
    g = models.gradient(spec, np.zeros(spec.param_count), np.array([[1.0, 0.0, 0.0]]), np.array([2]))
    assert np.allclose(g[-4:], [0.25, 0.25, -0.75, 0.25], atol=1e-15)


def test_mlp_gradient_matches_per_coordinate_differences():
    spec = models.mlp(3, 3, hidden_units=4)
    rng = np.random.default_rng(1)
    w = rng.normal(0, 0.5, spec.param_count)
    X, y = rng.standard_normal((3, 3)), np.array([0, 1, 2])
    g, fd = models.gradient(spec, w, X, y), fd_gradient(spec, w, X, y)
    assert np.all(np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from([models.SOFTMAX, models.MLP]),
       l2=st.sampled_from([0.0, 1e-3]))
def test_directional_derivative_matches_central_difference(seed, kind, l2):
    rng = np.random.default_rng(seed)
    spec = models.ModelSpec(kind, 4, 3, hidden_units=5, l2=l2)
    w = rng.normal(0, 0.5, spec.param_count)
    X, y = rng.standard_normal((6, 4)), rng.integers(0, 3, 6)
    u = rng.standard_normal(spec.param_count)
    u /= np.linalg.norm(u)
    h = 1e-6
    fd = (models.loss(spec, w + h * u, X, y) - models.loss(spec, w - h * u, X, y)) / (2 * h)
    exact = float(models.gradient(spec, w, X, y) @ u)
    assert abs(exact - fd) <= 1e-4 * max(abs(fd), 1e-4)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), lam=st.floats(0, 1))
def test_softmax_loss_is_convex(seed, lam):
    rng = np.random.default_rng(seed)
    spec = models.softmax_regression(3, 4)
    w1, w2 = rng.normal(0, 2, (2, spec.param_count))
    X, y = rng.standard_normal((5, 3)), rng.integers(0, 4, 5)
    mid = models.loss(spec, lam * w1 + (1 - lam) * w2, X, y)
    assert mid <= lam * models.loss(spec, w1, X, y) + (1 - lam) * models.loss(spec, w2, X, y) + 1e-9


def test_sgd_step_definition(sr4):
    rng = np.random.default_rng(2)
    w = rng.normal(size=sr4.param_count)
    X, y = rng.standard_normal((4, 4)), np.array([0, 1, 2, 0])
    assert np.array_equal(models.sgd_step(sr4, w, X, y, 0.0), w)
    assert np.allclose(models.sgd_step(sr4, w, X, y, 0.1), w - 0.1 * models.gradient(sr4, w, X, y), atol=0)


def test_two_small_steps_reduce_loss():
    spec = models.softmax_regression(1, 2)
    X, y = np.array([[1.0], [-1.0], [2.0]]), np.array([1, 0, 1])
    w = np.zeros(spec.param_count)
    losses = [models.loss(spec, w, X, y)]
    for _ in range(2):
        w = models.sgd_step(spec, w, X, y, 0.1)
        losses.append(models.loss(spec, w, X, y))
    assert losses[0] > losses[1] > losses[2]


def test_weighted_average_examples():
    a = np.array([1.0, 1.0])
    assert np.array_equal(models.weighted_average([a], [1.0]), a)
    assert np.allclose(models.weighted_average([a, a], [0.3, 0.7]), a, atol=1e-15)
    assert np.array_equal(models.weighted_average([a, np.array([3.0, 3.0])], [0.5, 0.5]), [2.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 6))
def test_weighted_average_is_order_insensitive(seed, n):
    rng = np.random.default_rng(seed)
    ms = list(rng.standard_normal((n, 5)))
    a = rng.uniform(0.1, 1, n)
    a = a / a.sum()
    perm = rng.permutation(n)
    a[-1] = 1 - a[:-1].sum()
    ref = models.weighted_average(ms, a)
    other = models.weighted_average([ms[i] for i in perm], [a[i] for i in perm])
    assert np.allclose(ref, other, atol=1e-12, rtol=0)


def test_weighted_average_rejects_bad_input():
    with pytest.raises(InvariantError):
        models.weighted_average([np.zeros(2)], [0.5])
    with pytest.raises(DomainError):
        models.weighted_average([np.zeros(2), np.zeros(2)], [1.5, -0.5])
    with pytest.raises(ShapeError):
        models.weighted_average([np.zeros(2), np.zeros(3)], [0.5, 0.5])


def test_accuracy_tie_rule_and_enumeration():
    spec = models.softmax_regression(2, 10)
    X = np.random.default_rng(0).standard_normal((20, 2))
    y = np.arange(20) % 10
    assert models.accuracy(spec, np.zeros(spec.param_count), X, y) == pytest.approx(2 / 20)
    spec2 = models.softmax_regression(1, 2)
    w = np.array([-1.0, 1.0, 0.0, 0.0])  # class 1 iff x > 0
    Xs = np.linspace(-1, 1, 20)[:, None]
    ys = np.array([1] * 10 + [0] * 10)  # the first ten are negative -> predicted 0
    assert models.accuracy(spec2, w, Xs, ys) == 0.0
    ys[:5] = 0  # five negatives now right
    ys[15:] = 1  # five positives now right
    assert models.accuracy(spec2, w, Xs, ys) == pytest.approx(10 / 20)


def test_shape_and_domain_errors(sr4):
    with pytest.raises(ShapeError):
        models.loss(sr4, np.zeros(3), np.zeros((1, 4)), np.array([0]))
    with pytest.raises(DomainError):
        models.loss(sr4, np.zeros(sr4.param_count), np.zeros((1, 4)), np.array([7]))
    with pytest.raises(DomainError):
        models.sgd_step(sr4, np.zeros(sr4.param_count), np.zeros((1, 4)), np.array([0]), float("nan"))
