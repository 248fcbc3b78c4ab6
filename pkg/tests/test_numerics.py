import math

import numpy as np
import pytest

from flgen.numerics import (
    Batch,
    ModelParams,
    backward,
    forward,
    init_params,
    param_count,
    per_sample_loss,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    zeros_like_values,
)

LN2 = 0.6931471805599453
LN10 = 2.302585092994046


def make_params(layers):
    """Pack a list of (W, b) pairs into ModelParams."""
    shapes = tuple((np.asarray(w).shape[0], np.asarray(w).shape[1]) for w, _ in layers)
    flat = np.concatenate([
        np.concatenate([np.asarray(w, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64)])
        for w, b in layers
    ])
    return ModelParams(flat, shapes)


def test_param_count():
    assert param_count([(3, 4), (4, 2)]) == 3 * 4 + 4 + 4 * 2 + 2


def test_model_params_rejects_bad_size():
    with pytest.raises(ValueError):
        ModelParams(np.zeros(5), ((3, 4),))


def test_model_params_rejects_shape_chain_break():
    n = param_count([(3, 4), (5, 2)])
    with pytest.raises(ValueError):
        ModelParams(np.zeros(n), ((3, 4), (5, 2)))


def test_model_params_names_first_nonfinite_index():
    vals = np.zeros(param_count([(2, 2)]))
    vals[3] = np.nan
    with pytest.raises(ValueError, match="index 3"):
        ModelParams(vals, ((2, 2),))


def test_model_params_values_frozen():
    p = make_params([(np.eye(2), np.zeros(2))])
    with pytest.raises(ValueError):
        p.values[0] = 9.0


def test_layers_views_round_trip():
    w0 = np.arange(6, dtype=np.float64).reshape(2, 3)
    b0 = np.array([1.0, 2.0, 3.0])
    w1 = np.arange(6, dtype=np.float64).reshape(3, 2)
    b1 = np.array([-1.0, -2.0])
    p = make_params([(w0, b0), (w1, b1)])
    (rw0, rb0), (rw1, rb1) = p.layers()
    assert np.array_equal(rw0, w0) and np.array_equal(rb0, b0)
    assert np.array_equal(rw1, w1) and np.array_equal(rb1, b1)


def test_init_params_he_statistics():
    # wide layer so the sample std is tight around sqrt(2 / fan_in)
    rng = np.random.default_rng(0)
    p = init_params([200, 300, 5], rng)
    (w0, b0), (w1, b1) = p.layers()
    assert np.allclose(b0, 0.0) and np.allclose(b1, 0.0)
    assert abs(w0.std() - math.sqrt(2.0 / 200)) < 0.005
    assert abs(w1.std() - math.sqrt(2.0 / 300)) < 0.005


def test_init_params_layer_draw_order():
    # weights come out layer by layer from one stream
    rng = np.random.default_rng(7)
    p = init_params([3, 4, 2], rng)
    ref = np.random.default_rng(7)
    w0 = ref.normal(0.0, math.sqrt(2.0 / 3), size=(3, 4))
    w1 = ref.normal(0.0, math.sqrt(2.0 / 4), size=(4, 2))
    (got0, _), (got1, _) = p.layers()
    assert np.array_equal(got0, w0)
    assert np.array_equal(got1, w1)


def test_forward_linear_exact():
    w = np.array([[1.0, -1.0], [2.0, 0.5]])
    b = np.array([0.25, -0.25])
    p = make_params([(w, b)])
    x = np.array([[1.0, 2.0], [0.0, -1.0]])
    trace = forward(p, Batch(x, np.array([0, 1])))
    assert np.array_equal(trace.logits, x @ w + b)
    # single-layer model: the "features" feeding the head are the inputs
    assert np.array_equal(trace.features, x)


def test_forward_relu_masks_negatives():
    w0 = np.eye(2)
    b0 = np.array([0.0, 0.0])
    w1 = np.eye(2)
    b1 = np.zeros(2)
    p = make_params([(w0, b0), (w1, b1)])
    x = np.array([[-3.0, 2.0]])
    trace = forward(p, Batch(x, np.array([1])))
    assert np.array_equal(trace.features, [[0.0, 2.0]])
    assert np.array_equal(trace.logits, [[0.0, 2.0]])


def test_forward_width_mismatch():
    p = make_params([(np.eye(3), np.zeros(3))])
    with pytest.raises(ValueError):
        forward(p, Batch(np.zeros((1, 2)), np.array([0])))


def test_softmax_handles_huge_logits():
    s = softmax(np.array([[1e4, 0.0, -1e4]]))
    assert np.isfinite(s).all()
    assert abs(s.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("logits,label,expected", [
    (np.zeros(10), 0, LN10),
    (np.zeros(2), 1, LN2),
    (np.array([1.0, 0.0]), 0, 0.31326168751822286),   # ln(1 + e^-1)
    (np.array([2.0, 0.0]), 0, 0.12692801104297263),   # ln(1 + e^-2)
])
def test_per_sample_loss_frozen_values(logits, label, expected):
    got = per_sample_loss(logits[None, :], np.array([label]))
    assert got.shape == (1,)
    assert got[0] == pytest.approx(expected, abs=1e-15)


def test_per_sample_loss_names_bad_label():
    with pytest.raises(ValueError, match="label 5"):
        per_sample_loss(np.zeros((1, 3)), np.array([5]))


def test_cross_entropy_gradient_matches_numeric(numeric_gradient):
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)

    def f(flat):
        return softmax_cross_entropy(flat.reshape(4, 5), labels)[0]

    _, dlogits = softmax_cross_entropy(logits, labels)
    num = numeric_gradient(f, logits.ravel()).reshape(4, 5)
    assert np.allclose(dlogits, num, atol=1e-8)


def test_cross_entropy_is_mean_reduced():
    logits = np.array([[1.0, 0.0], [2.0, 0.0]])
    labels = np.array([0, 0])
    loss, _ = softmax_cross_entropy(logits, labels)
    expected = (0.31326168751822286 + 0.12692801104297263) / 2.0
    assert loss == pytest.approx(expected, abs=1e-15)


def test_backward_matches_numeric(numeric_gradient):
    rng = np.random.default_rng(11)
    params = init_params([3, 4, 2], rng)
    x = rng.normal(size=(5, 3))
    labels = rng.integers(0, 2, size=5)
    batch = Batch(x, labels)

    def f(flat):
        p = ModelParams(flat, params.layer_shapes)
        t = forward(p, batch)
        return softmax_cross_entropy(t.logits, labels)[0]

    trace = forward(params, batch)
    _, dlogits = softmax_cross_entropy(trace.logits, labels)
    grad = backward(params, trace, dlogits)
    num = numeric_gradient(f, params.values)
    assert np.allclose(grad, num, atol=1e-7)


def test_backward_feature_injection_matches_numeric(numeric_gradient):
    # extra loss c . features, its gradient enters at the penultimate layer
    rng = np.random.default_rng(12)
    params = init_params([3, 4, 2], rng)
    x = rng.normal(size=(4, 3))
    labels = rng.integers(0, 2, size=4)
    batch = Batch(x, labels)
    coeff = rng.normal(size=(4, 4))

    def f(flat):
        p = ModelParams(flat, params.layer_shapes)
        t = forward(p, batch)
        return softmax_cross_entropy(t.logits, labels)[0] + float((coeff * t.features).sum())

    trace = forward(params, batch)
    _, dlogits = softmax_cross_entropy(trace.logits, labels)
    grad = backward(params, trace, dlogits, dfeatures=coeff)
    num = numeric_gradient(f, params.values)
    assert np.allclose(grad, num, atol=1e-7)


def test_backward_rejects_stale_trace():
    rng = np.random.default_rng(1)
    p1 = init_params([3, 4, 2], rng)
    p2 = init_params([3, 5, 2], rng)
    batch = Batch(np.zeros((2, 3)), np.array([0, 1]))
    trace = forward(p1, batch)
    _, dlogits = softmax_cross_entropy(trace.logits, batch.labels)
    with pytest.raises(ValueError):
        backward(p2, trace, dlogits)


def test_sgd_step_exact():
    p = make_params([(np.array([[1.0]]), np.array([2.0]))])
    out = sgd_step(p, np.array([10.0, 20.0]), 0.1)
    assert np.array_equal(out.values, [0.0, 0.0])


def test_sgd_step_rejects_negative_lr():
    p = make_params([(np.array([[1.0]]), np.array([0.0]))])
    with pytest.raises(ValueError):
        sgd_step(p, np.zeros(2), -0.1)


def test_sgd_step_names_nonfinite_gradient_index():
    p = make_params([(np.array([[1.0]]), np.array([0.0]))])
    g = np.array([0.0, np.inf])
    with pytest.raises(ValueError, match="index 1"):
        sgd_step(p, g, 0.1)


def test_zeros_like_values():
    p = make_params([(np.ones((2, 2)), np.ones(2))])
    z = zeros_like_values(p)
    assert z.shape == p.values.shape and not z.any()


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 3)), np.array([0, -1]))
