import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modguard.classifier import (
    EPS, ClassScores, LabeledSample, LinearHead, LossWeights, OptimizerConfig, OptimizerKind,
    ScoreMode, evaluate_head, loss_gradient, make_dial_dataset, make_separable_dataset,
    precision_recall_dial, sigmoid_scores, softmax_scores, train_toy, weighted_bce_loss,
)
from modguard.errors import ConfigError

from oracles import central_difference

ML, BIN = ScoreMode.MULTI_LABEL, ScoreMode.BINARY


def _mean_loss(z, y, w, mode):
    scores = sigmoid_scores(z) if mode is ML else softmax_scores(z)
    return weighted_bce_loss(scores, y, w)[1]


# -- score heads -------------------------------------------------------------

def test_sigmoid_zero_logits():
    s = sigmoid_scores(np.zeros(81))
    assert s.mode is ML and s.nsfw_index == 80
    np.testing.assert_array_equal(s.values, 0.5)


def test_sigmoid_saturation_and_closed_form():
    assert sigmoid_scores([1e3]).values[0] == pytest.approx(1.0, abs=1e-12)
    assert sigmoid_scores([math.log(3)]).values[0] == pytest.approx(0.75, abs=1e-15)
    assert sigmoid_scores([-1e3]).values[0] == 0.0


def test_softmax_cases():
    np.testing.assert_array_equal(softmax_scores([0.3, 0.3]).values, [0.5, 0.5])
    with np.errstate(over="raise"):
        s = softmax_scores([1e4, 0.0])
    np.testing.assert_allclose(s.values, [1.0, 0.0])
    np.testing.assert_allclose(softmax_scores([math.log(3), 0]).values, [0.75, 0.25], atol=1e-15)
    assert softmax_scores([0.0, math.log(3)]).nsfw == pytest.approx(0.75)
    with pytest.raises(ValueError):
        softmax_scores([1.0, 2.0, 3.0])


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(a, b, c):
    np.testing.assert_allclose(softmax_scores([a + c, b + c]).values, softmax_scores([a, b]).values,
                               atol=1e-9)


def test_class_scores_validation():
    with pytest.raises(ValueError):
        ClassScores(BIN, np.array([0.4, 0.4]), 1)
    with pytest.raises(ValueError):
        ClassScores(ML, np.array([1.2]), 0)
    with pytest.raises(ValueError):
        ClassScores(ML, np.array([0.2]), 3)


# -- loss --------------------------------------------------------------------

def test_loss_analytic_cases():
    one = LossWeights.uniform(1)
    assert abs(weighted_bce_loss([0.5], [1], one)[1] - math.log(2)) <= 1e-9
    assert abs(weighted_bce_loss([1.0], [1], one)[1]) <= 1e-9
    assert abs(weighted_bce_loss([0.0], [0], one)[1]) <= 1e-9
    two = LossWeights([2.0], [1.0])
    assert abs(weighted_bce_loss([0.5], [1], two)[1] - 2 * math.log(2)) <= 1e-9


def test_loss_is_finite_at_hard_mistakes():
    per, mean = weighted_bce_loss([0.0, 1.0], [1, 0], LossWeights.uniform(2))
    np.testing.assert_allclose(per, -math.log(EPS))
    assert math.isfinite(mean)


def test_loss_mean_over_classes():
    w = LossWeights([1.0, 3.0], [2.0, 1.0])
    per, mean = weighted_bce_loss([0.8, 0.3], [0, 1], w)
    np.testing.assert_allclose(per, [-2 * math.log(0.2), -3 * math.log(0.3)])
    assert mean == pytest.approx(per.mean())


def test_loss_length_mismatch():
    with pytest.raises(ValueError):
        weighted_bce_loss([0.5, 0.5], [1], LossWeights.uniform(2))
    with pytest.raises(ValueError):
        LossWeights([1.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        LossWeights([0.0], [1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_loss_properties(seed, k):
    gen = np.random.default_rng(seed)
    c = int(gen.integers(1, 6))
    p = gen.uniform(0.001, 0.999, size=c)
    y = gen.integers(0, 2, size=c).astype(float)
    w = LossWeights(gen.uniform(0.1, 3, size=c), gen.uniform(0.1, 3, size=c))
    per, _ = weighted_bce_loss(p, y, w)
    assert np.all(per >= 0)
    scaled, _ = weighted_bce_loss(p, y, LossWeights(k * w.alpha, k * w.beta))
    np.testing.assert_allclose(scaled, k * per, rtol=1e-12)
    plain = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    np.testing.assert_allclose(weighted_bce_loss(p, y, LossWeights.uniform(c))[0], plain, rtol=1e-12)


# -- gradient ----------------------------------------------------------------

def test_gradient_closed_forms():
    g = loss_gradient([0.0], [1.0], LossWeights.uniform(1), ML)
    np.testing.assert_allclose(g, [-0.5], atol=1e-15)
    z = np.array([0.3, -1.2, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    p = 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(loss_gradient(z, y, LossWeights.uniform(3), ML), (p - y) / 3, atol=1e-15)


def test_gradient_vanishes_at_perfect_prediction():
    w = LossWeights.uniform(2)
    np.testing.assert_allclose(loss_gradient([40.0, -40.0], [1, 0], w, ML), 0.0, atol=1e-15)
    np.testing.assert_allclose(loss_gradient([-40.0, 40.0], [0, 1], w, BIN), 0.0, atol=1e-15)


@pytest.mark.parametrize("mode", [ML, BIN])
@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(mode, seed):
    gen = np.random.default_rng(seed)
    c = 2 if mode is BIN else int(gen.integers(1, 8))
    z = gen.normal(0, 2, size=c)
    if mode is BIN:
        y = np.eye(2)[gen.integers(0, 2)]
    else:
        y = gen.integers(0, 2, size=c).astype(float)
    w = LossWeights(gen.uniform(0.2, 3, size=c), gen.uniform(0.2, 3, size=c))
    analytic = loss_gradient(z, y, w, mode)
    numeric = central_difference(lambda v: _mean_loss(v, y, w, mode), z)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    assert rel.max() < 1e-5


def test_gradient_batched_rows_match_single():
    gen = np.random.default_rng(9)
    z = gen.normal(size=(5, 3))
    y = gen.integers(0, 2, size=(5, 3)).astype(float)
    w = LossWeights.uniform(3)
    batched = loss_gradient(z, y, w, ML)
    for i in range(5):
        np.testing.assert_array_equal(batched[i], loss_gradient(z[i], y[i], w, ML))


# -- training ----------------------------------------------------------------

def test_separable_set_is_learned():
    x, y = make_separable_dataset(200, seed=0)
    head, log = train_toy((x, y), LossWeights.uniform(1), OptimizerConfig(epochs=50))
    assert len(log.epoch_loss) == 50
    assert max(log.epoch_accuracy) >= 0.99
    assert log.epoch_accuracy[-1] >= 0.99
    assert log.epoch_loss[-1] < log.epoch_loss[0]


def test_separable_set_binary_softmax():
    x, y = make_separable_dataset(200, seed=1)
    onehot = np.hstack([1 - y, y])
    head, log = train_toy((x, onehot), LossWeights.uniform(2), OptimizerConfig(epochs=50), mode=BIN)
    assert head.class_labels == ("sfw", "nsfw") and head.nsfw_index == 1
    assert log.epoch_accuracy[-1] >= 0.99


def test_rmsprop_trains():
    x, y = make_separable_dataset(200, seed=2)
    opt = OptimizerConfig.rmsprop(epochs=50)
    assert opt.kind is OptimizerKind.RMSPROP and opt.learning_rate == 0.004
    _, log = train_toy((x, y), LossWeights.uniform(1), opt)
    assert log.epoch_accuracy[-1] >= 0.99


def test_zero_learning_rate_leaves_parameters():
    x, y = make_separable_dataset(50, seed=3)
    _, log = train_toy((x, y), LossWeights.uniform(1), OptimizerConfig(learning_rate=0.0, epochs=3))
    w0, b0 = log.trajectory[0]
    for w, b in log.trajectory[1:]:
        assert np.array_equal(w, w0) and np.array_equal(b, b0)
    np.testing.assert_array_equal(b0, 0.0)


def test_training_is_deterministic():
    x, y = make_dial_dataset(300, seed=4)
    opt = OptimizerConfig(epochs=5, seed=17)
    _, a = train_toy((x, y), LossWeights.uniform(1), opt)
    _, b = train_toy((x, y), LossWeights.uniform(1), opt)
    assert a.epoch_loss == b.epoch_loss
    for (wa, ba), (wb, bb) in zip(a.trajectory, b.trajectory):
        assert np.array_equal(wa, wb) and np.array_equal(ba, bb)


def test_labeled_samples_accepted():
    samples = [LabeledSample((1.0, 1.0), (1,)), LabeledSample((-1.0, -1.0), (0,))]
    head, log = train_toy(samples, LossWeights.uniform(1), OptimizerConfig(epochs=2, batch_size=1))
    assert head.weights.shape == (2, 1) and len(log.epoch_loss) == 2


def test_training_config_errors():
    with pytest.raises(ConfigError):
        train_toy([], LossWeights.uniform(1))
    with pytest.raises(ConfigError):
        train_toy([LabeledSample((1.0,), (1,)), LabeledSample((1.0, 2.0), (0,))], LossWeights.uniform(1))
    x, y = make_separable_dataset(10)
    with pytest.raises(ConfigError):
        train_toy((x, y), LossWeights.uniform(2))
    with pytest.raises(ConfigError):
        OptimizerConfig(batch_size=0)


def test_head_json_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    head = LinearHead(gen.normal(size=(4, 3)), gen.normal(size=3), ML, ("a", "b", "nsfw"))
    path = tmp_path / "head.json"
    head.save(path)
    back = LinearHead.load(path)
    assert back.class_labels == head.class_labels and back.nsfw_index == 2 and back.mode is ML
    np.testing.assert_array_equal(back.weights, head.weights)
    np.testing.assert_array_equal(back.bias, head.bias)
    x = gen.normal(size=4)
    assert back.scores(x) == head.scores(x)


# -- dial --------------------------------------------------------------------

DIAL_OPT = OptimizerConfig(epochs=10)


def test_dial_beta_raises_precision_lowers_recall():
    data = make_dial_dataset(2000, seed=0)
    lo, hi = precision_recall_dial(data, [1.0, 2.0], opt=DIAL_OPT)
    assert hi.precision >= lo.precision
    assert hi.recall <= lo.recall


def test_dial_alpha_raises_recall():
    data = make_dial_dataset(2000, seed=0)
    (base,) = precision_recall_dial(data, [1.0], opt=DIAL_OPT)
    (boosted,) = precision_recall_dial(data, [1.0], alpha_nsfw=2.0, opt=DIAL_OPT)
    assert boosted.recall >= base.recall


def test_single_beta_matches_direct_training():
    x, y = make_dial_dataset(500, seed=5)
    (row,) = precision_recall_dial((x, y), [1.5], opt=DIAL_OPT)
    head, _ = train_toy((x, y), LossWeights([1.0], [1.5]), DIAL_OPT)
    assert row.counts == evaluate_head(head, x, y)
    assert (row.alpha, row.beta) == (1.0, 1.5)
    assert row.counts.total == 500
