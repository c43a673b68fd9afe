import math

import numpy as np
import pytest

from calibsmooth.baselines import (
    BaselineSpec,
    apply_temperature,
    baseline_loss,
    erl_logit_grad,
    erl_loss,
    fit_temperature,
    manifold_mixup_loss,
    mc_dropout_predict,
    mixup_batch,
    sample_mix_weight,
    smooth_labels,
)
from calibsmooth.numerics import cross_entropy, forward, softmax
from conftest import central_diff, random_model, rel_err


def calibrated_logits(rng, n=20000, k=4):
    """Logits plus labels drawn from their own softmax: the MLE temperature is 1."""
    logits = rng.normal(scale=2.0, size=(n, k))
    probs = softmax(logits)
    labels = np.array([rng.choice(k, p=p) for p in probs])
    return logits, labels


def test_fit_temperature_calibrated_is_one(rng):
    logits, labels = calibrated_logits(rng)
    assert fit_temperature(logits, labels) == pytest.approx(1.0, abs=0.03)


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_fit_temperature_recovers_scale(rng, c):
    logits, labels = calibrated_logits(rng)
    assert fit_temperature(c * logits, labels) == pytest.approx(c, rel=0.03)


def test_fit_temperature_minimizes_nll(rng):
    logits, labels = calibrated_logits(rng, n=2000)
    logits *= 2.5
    t = fit_temperature(logits, labels)
    nll = lambda s: np.mean(cross_entropy(np.eye(4)[labels], apply_temperature(logits, s)))
    for s in (t * 0.98, t * 1.02):
        assert nll(t) <= nll(s)


def test_fit_temperature_single_class_warns(caplog):
    with caplog.at_level("WARNING"):
        assert fit_temperature(np.ones((3, 2)), np.zeros(3, int)) == 1.0
    assert "single class" in caplog.text


def test_temperature_preserves_argmax(rng):
    logits = rng.normal(size=(500, 5)) * 4
    labels = rng.integers(0, 5, 500)
    t = fit_temperature(logits, labels)
    np.testing.assert_array_equal(np.argmax(apply_temperature(logits, t), 1), np.argmax(logits, 1))


def test_apply_temperature_examples():
    np.testing.assert_allclose(apply_temperature([2.0, 0.0], 1.0), softmax([2.0, 0.0]))
    np.testing.assert_allclose(apply_temperature([2.0, 0.0], 2.0), [0.7311, 0.2689], atol=5e-5)
    assert np.max(np.abs(apply_temperature([5.0, -3.0, 1.0], 1e6) - 1 / 3)) < 1e-5
    with pytest.raises(ValueError):
        apply_temperature([1.0, 0.0], 0.0)


def test_mc_dropout_single_pass_equals_train_forward(rng):
    model = random_model(rng, dropout_rate=0.3)
    x = rng.normal(size=(4, 3))
    a = mc_dropout_predict(model, x, 1, np.random.default_rng(11))
    b = forward(model, x, "train", np.random.default_rng(11)).output
    np.testing.assert_array_equal(a, b)


def test_mc_dropout_without_dropout(rng, caplog):
    model = random_model(rng)
    x = rng.normal(size=(4, 3))
    with caplog.at_level("WARNING"):
        out = mc_dropout_predict(model, x, 7, rng)
    np.testing.assert_array_equal(out, forward(model, x).output)


def test_mc_dropout_sums_to_one(rng):
    model = random_model(rng, dropout_rate=0.5)
    out = mc_dropout_predict(model, rng.normal(size=(10, 3)), 10, rng)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_smooth_labels_examples():
    y = np.array([1.0, 0, 0, 0])
    np.testing.assert_array_equal(smooth_labels(y, 0.0), y)
    np.testing.assert_allclose(smooth_labels(y, 0.1), [0.9, 0.1 / 3, 0.1 / 3, 0.1 / 3])
    assert smooth_labels(y, 0.05).sum() == pytest.approx(1.0)


def test_erl_examples(rng):
    p = softmax(rng.normal(size=3))
    y = np.array([0, 1.0, 0])
    assert erl_loss(p, y, 0.0) == pytest.approx(cross_entropy(y, p))
    assert erl_loss([0.5, 0.5], [1.0, 0.0], 1.0) == pytest.approx(0.0, abs=1e-15)


def test_erl_gradient_matches_finite_differences(rng):
    z = rng.normal(size=(5, 3))
    y = np.eye(3)[rng.integers(0, 3, 5)]
    f = lambda: np.sum(erl_loss(softmax(z), y, 0.7))
    assert rel_err(erl_logit_grad(softmax(z), y, 0.7), central_diff(f, z)) < 1e-6


def test_mixup_examples(rng):
    x = rng.normal(size=(4, 3))
    y = np.eye(3)[[0, 1, 2, 0]]
    same = mixup_batch(x, y, 0.2, rng, lam=1.0)
    np.testing.assert_array_equal(same.x, x)
    np.testing.assert_array_equal(same.y, y)
    half = mixup_batch(x[:2], np.eye(3)[[0, 1]], 0.2, np.random.default_rng(1), lam=0.5)
    if half.perm[0] == 1:
        np.testing.assert_array_equal(half.y[0], [0.5, 0.5, 0.0])
    with pytest.raises(ValueError):
        mixup_batch(x[:1], y[:1], 0.2, rng)


def test_beta_mean_and_small_alpha(rng):
    draws = np.array([sample_mix_weight(0.2, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    tiny = rng.beta(0.01, 0.01, 100_000)
    near_end = np.minimum(tiny, 1 - tiny) < 0.01
    assert near_end.mean() >= 0.95


def test_manifold_mixup_gradient(rng):
    model = random_model(rng, sizes=(3, 5, 4, 3), split_index=2, dropout_rate=0.2)
    x = rng.normal(size=(6, 3))
    y = np.eye(3)[rng.integers(0, 3, 6)]

    def loss():
        return manifold_mixup_loss(model, x, y, 0.4, np.random.default_rng(2), dropout_rng=np.random.default_rng(5))[0]

    _, tape = manifold_mixup_loss(model, x, y, 0.4, np.random.default_rng(2), dropout_rng=np.random.default_rng(5))
    for p, g in zip(model.parameters(), tape.parameters()):
        assert rel_err(g, central_diff(loss, p)) < 1e-5


def test_manifold_mixup_lambda_one_is_plain_ce(rng):
    model = random_model(rng)
    x = rng.normal(size=(5, 3))
    y = np.eye(3)[rng.integers(0, 3, 5)]
    loss, _ = manifold_mixup_loss(model, x, y, 1.0, rng, lam=1.0)
    assert loss == pytest.approx(np.mean(cross_entropy(y, forward(model, x).output)))


@pytest.mark.parametrize("kind", ["vanilla", "label-smoothing", "entropy-regularized", "mixup"])
def test_baseline_loss_gradients(rng, kind):
    model = random_model(rng)
    x = rng.normal(size=(6, 3))
    y = np.eye(3)[rng.integers(0, 3, 6)]
    spec = BaselineSpec(kind=kind)
    loss = lambda: baseline_loss(spec, model, x, y, np.random.default_rng(0))[0]
    _, tape = baseline_loss(spec, model, x, y, np.random.default_rng(0))
    for p, g in zip(model.parameters(), tape.parameters()):
        assert rel_err(g, central_diff(loss, p)) < 1e-5


def test_spec_validation():
    with pytest.raises(ValueError):
        BaselineSpec(kind="vat")
    with pytest.raises(ValueError):
        BaselineSpec(smoothing=1.0)
    with pytest.raises(ValueError):
        BaselineSpec(mixup_alpha=0.0)
    with pytest.raises(ValueError):
        BaselineSpec(mc_passes=0)
