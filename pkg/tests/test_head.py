import math

import numpy as np
import pytest

from higo import arraycore as ac
from higo.arraycore import Array
from higo.head import class_weights, decode, fire_probability, init_head, weighted_ce
from higo.params import ModelParams

D, K = 4, 5


@pytest.fixture
def hp():
    p = ModelParams(np.random.default_rng(0))
    init_head(p, D, K)
    return p


def test_zero_logits_uniform(hp):
    hp["head.dec.W2"].data[:] = 0.0
    hp["head.dec.b2"].data[:] = 0.0
    probs = decode(Array(np.random.default_rng(1).normal(size=(6, D))), hp, (2, 3)).data
    assert probs.shape == (2, 3, K)
    np.testing.assert_array_equal(probs, 1.0 / K)


def test_probabilities_sum_and_fire_complement(hp):
    probs = decode(Array(np.random.default_rng(2).normal(size=(3, 12, D))), hp, (3, 4)).data
    assert probs.shape == (3, 3, 4, K)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fire_probability(probs), probs[..., 1:].sum(axis=-1), atol=1e-12)


def test_logit_shift_invariance(hp):
    x = Array(np.random.default_rng(3).normal(size=(6, D)))
    base = decode(x, hp, (2, 3)).data
    hp["head.dec.b2"].data += 3.7
    np.testing.assert_allclose(decode(x, hp, (2, 3)).data, base, atol=1e-14)


def test_binary_head():
    p = ModelParams(np.random.default_rng(0))
    init_head(p, D, 2, binary=True)
    probs = decode(Array(np.random.default_rng(4).normal(size=(4, D))), p, (2, 2), binary=True).data
    assert probs.shape == (2, 2, 2)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-15)


def test_class_weights_examples():
    np.testing.assert_array_equal(class_weights([0, 1, 2, 0, 1, 2], 3), [1.0, 1.0, 1.0])
    np.testing.assert_allclose(class_weights([0, 0, 0, 1], 2), [0.5, 1.5], atol=1e-15)
    # class 2 absent: inherits the rarest present class's weight before renormalisation
    raw = np.array([7 / (3 * 6), 7 / (3 * 1), 7 / (3 * 1)])
    np.testing.assert_allclose(class_weights([0] * 6 + [1], 3), raw / raw.mean(), atol=1e-15)
    with pytest.raises(ValueError):
        class_weights([], 2)
    with pytest.raises(ValueError):
        class_weights([0, 3], 3)


def test_weighted_ce_examples():
    labels = np.array([[0, 2], [1, 4]])
    onehot = np.eye(K)[labels]
    w = np.array([0.5, 1.0, 1.2, 0.8, 1.5])
    assert weighted_ce(Array(onehot), labels, w).data == 0.0
    uniform = np.full((2, 2, K), 1.0 / K)
    expect = math.log(K) * w[labels].mean()
    assert float(weighted_ce(Array(uniform), labels, w).data) == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        weighted_ce(Array(uniform), np.array([[0, 5], [1, 1]]), w)


def test_doubling_fire_weight_doubles_fire_contribution():
    rng = np.random.default_rng(5)
    probs = rng.dirichlet(np.ones(K), size=(3, 3))
    labels = rng.integers(0, K, size=(3, 3))
    labels[0, 0], labels[1, 1] = 0, 3
    w = np.ones(K)
    w2 = w.copy()
    w2[1:] *= 2
    cells = -np.log(probs[np.arange(3)[:, None], np.arange(3)[None], labels])
    fire = labels > 0
    l1 = float(weighted_ce(Array(probs), labels, w).data)
    l2 = float(weighted_ce(Array(probs), labels, w2).data)
    assert l2 - l1 == pytest.approx(cells[fire].sum() / 9, rel=1e-12)


def test_loss_nonnegative_and_clamped():
    probs = np.zeros((1, 2, K))
    probs[..., 0] = 1.0
    labels = np.array([[1, 0]])
    loss = float(weighted_ce(Array(probs), labels, np.ones(K)).data)
    assert loss == pytest.approx(-math.log(1e-12) / 2)
    assert loss >= 0


def test_gradient_matches_analytic_softmax_ce():
    rng = np.random.default_rng(6)
    logits = ac.Parameter(rng.normal(size=(3, 4, K)))
    labels = rng.integers(0, K, size=(3, 4))
    w = rng.uniform(0.5, 2.0, size=K)
    with ac.tape():
        loss = weighted_ce(ac.softmax(logits, axis=-1), labels, w)
        ac.backward(loss)
    p = np.exp(logits.data - logits.data.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    analytic = w[labels][..., None] * (p - np.eye(K)[labels]) / labels.size
    np.testing.assert_allclose(logits.grad, analytic, atol=1e-10)
