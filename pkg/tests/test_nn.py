import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from passive_causal.nn import (
    Adam, AttentionPolicyNet, PolicyNet, clip_by_global_norm, global_norm, log_softmax, net_from_arrays,
    numerical_gradients,
)


def small(kind, seed, **kw):
    if kind == "lstm":
        return PolicyNet(7, 4, hidden=kw.get("hidden", 5), embed=kw.get("embed", 4), seed=seed,
                         dtype=np.float64, head_scale=1.0)
    return AttentionPolicyNet(7, 4, hidden=kw.get("hidden", 4), heads=2, layers=kw.get("layers", 1), mlp=6,
                              seed=seed, dtype=np.float64, head_scale=1.0)


def batch(seed, B=3, T=4, D=7, A=4):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, T, D))
    y = rng.integers(A, size=(B, T))
    mask = (rng.random((B, T)) < 0.7).astype(float)
    mask[0, 0] = 1.0
    return x, y, mask


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("kind", ["lstm", "attention"])
@pytest.mark.parametrize("smoothing", [0.0, 0.2])
def test_gradients_match_finite_differences(kind, smoothing):
    net = small(kind, 1, layers=2)
    x, y, mask = batch(2)
    _, grads = net.loss_and_grads(x, y, mask, smoothing)
    num = numerical_gradients(net, x, y, mask, smoothing=smoothing)
    for k in grads:
        assert rel_err(grads[k], num[k]) < 1e-5, k


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_step_matches_forward(kind):
    net = small(kind, 3)
    x, _, _ = batch(4)
    full = net.forward(x)
    state = net.initial_state(3)
    for t in range(x.shape[1]):
        logits, state = net.step(x[:, t], state)
        np.testing.assert_allclose(logits, full[:, t], rtol=1e-10, atol=1e-12)


def test_attention_is_causal():
    net = small("attention", 5)
    x, _, _ = batch(6)
    y = x.copy()
    y[:, -1] += 10.0
    np.testing.assert_allclose(net.forward(x)[:, :-1], net.forward(y)[:, :-1], rtol=1e-12)


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_zero_inputs_have_finite_gradients(kind):
    net = small(kind, 0)
    x = np.zeros((2, 3, 7))
    _, grads = net.loss_and_grads(x, np.zeros((2, 3), dtype=int))
    assert all(np.isfinite(g).all() for g in grads.values())


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_duplicated_sample_scales_summed_gradient(kind):
    net = small(kind, 2)
    x, y, _ = batch(3, B=1)
    _, g1 = net.loss_and_grads(x, y)
    _, g2 = net.loss_and_grads(np.concatenate([x, x]), np.concatenate([y, y]))
    for k in g1:
        # summed over steps, the duplicate contributes twice the single-sample gradient
        np.testing.assert_allclose(g2[k] * (2 * y.size), 2 * (g1[k] * y.size), rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_initial_loss_near_uniform(kind):
    net = (PolicyNet(25, 10, hidden=64) if kind == "lstm" else AttentionPolicyNet(25, 10, hidden=64))
    x, y, _ = batch(0, B=16, T=6, D=25, A=10)
    assert abs(net.loss(x, y) - math.log(10)) < 0.05


@pytest.mark.parametrize("kind", ["lstm", "attention"])
def test_roundtrip_arrays(kind):
    net = small(kind, 9)
    clone = net_from_arrays(net.hyper(), net.params)
    x, _, _ = batch(1)
    np.testing.assert_array_equal(net.forward(x), clone.forward(x))
    copy = net.copy()
    copy.params["W_out"] += 1
    assert not np.array_equal(copy.params["W_out"], net.params["W_out"])
    with pytest.raises(ValueError):
        net_from_arrays({**net.hyper(), "kind": "conv"}, net.params)


def test_horizon_enforced():
    net = PolicyNet(7, 4, hidden=3, horizon=2)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 3, 7)))
    with pytest.raises(ValueError):
        AttentionPolicyNet(7, 4, hidden=6, heads=4)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_log_softmax_normalised(xs):
    lp = log_softmax(np.array([xs]))
    assert abs(np.exp(lp).sum() - 1.0) < 1e-9
    np.testing.assert_allclose(lp[0] - lp[0, 0], np.array(xs) - xs[0], atol=1e-9)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(g) == 5.0
    c, norm = clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    assert global_norm(c) == pytest.approx(1.0)
    c, _ = clip_by_global_norm(g, 10.0)
    assert c is g


def test_adam_first_step_and_decay():
    p = {"W": np.array([1.0, -1.0]), "b": np.array([0.5])}
    g = {"W": np.array([0.1, -3.0]), "b": np.array([2.0])}
    opt = Adam(lr=0.01)
    opt.update(p, g)
    # the first bias-corrected step has magnitude lr in every coordinate
    np.testing.assert_allclose(p["W"], [0.99, -0.99])
    np.testing.assert_allclose(p["b"], [0.49])
    q = {"W": np.array([1.0]), "b": np.array([1.0])}
    zero = {"W": np.array([0.0]), "b": np.array([0.0])}
    Adam(lr=0.1, weight_decay=0.5).update(q, zero)
    assert q["W"][0] == pytest.approx(0.95)
    assert q["b"][0] == 1.0


def test_label_smoothing_floor():
    net = small("lstm", 0)
    x, y, _ = batch(0)
    base = net.loss(x, y)
    smooth = net.loss(x, y, smoothing=0.3)
    assert np.isfinite(smooth) and smooth != base
