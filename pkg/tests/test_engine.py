import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blockrepair.engine import Tape, Tensor, TrainConfig, backward, ops, sgd_step, train_loop
from blockrepair.errors import ConfigError, DimensionError, InputError, NumericFailure, UsageError

from conftest import fd_check


def T(a, grad=False):
    return Tensor(np.asarray(a, np.float32), requires_grad=grad)


# conv2d -------------------------------------------------------------------

def test_conv_identity_kernel():
    x = T(np.arange(4).reshape(1, 1, 2, 2))
    y = ops.conv2d(x, T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_zero_kernel(rng):
    x = T(rng.normal(size=(2, 3, 5, 5)))
    y = ops.conv2d(x, T(np.zeros((4, 3, 3, 3))), pad=1)
    assert y.shape == (2, 4, 5, 5)
    assert not y.data.any()


def test_conv_hand_example():
    x = T(np.arange(1, 10).reshape(1, 1, 3, 3))
    k = T([[[[1, 0], [0, 1]]]])
    np.testing.assert_array_equal(ops.conv2d(x, k).data[0, 0], [[6, 8], [12, 14]])


@pytest.mark.parametrize("h,k,stride,pad,dil", [(7, 3, 1, 0, 1), (8, 3, 2, 1, 1), (9, 3, 1, 2, 2), (5, 2, 3, 1, 1)])
def test_conv_output_size(h, k, stride, pad, dil):
    y = ops.conv2d(T(np.ones((1, 2, h, h))), T(np.ones((3, 2, k, k))), stride, pad, dil)
    expect = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    assert y.shape == (1, 3, expect, expect)


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    got = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(got)
    for n in range(2):
        for o in range(4):
            for i in range(got.shape[2]):
                for j in range(got.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(got, ref, rtol=1e-12)


def test_depthwise_and_grouped_match_dense(rng):
    x = Tensor(rng.normal(size=(2, 4, 5, 5)), dtype=np.float64)
    w = rng.normal(size=(4, 1, 3, 3))
    dense = np.zeros((4, 4, 3, 3))
    for c in range(4):
        dense[c, c] = w[c, 0]
    a = ops.conv2d(x, Tensor(w, dtype=np.float64), pad=2, dilation=2, groups=4).data
    b = ops.conv2d(x, Tensor(dense, dtype=np.float64), pad=2, dilation=2).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    wg = rng.normal(size=(6, 2, 3, 3))
    dense = np.zeros((6, 4, 3, 3))
    dense[:3, :2] = wg[:3]
    dense[3:, 2:] = wg[3:]
    a = ops.conv2d(x, Tensor(wg, dtype=np.float64), pad=1, groups=2).data
    b = ops.conv2d(x, Tensor(dense, dtype=np.float64), pad=1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(DimensionError) as ei:
        ops.conv2d(T(np.ones((1, 3, 4, 4))), T(np.ones((2, 2, 3, 3))))
    assert ei.value.axis == "channels"


def test_conv_too_small_names_axis():
    with pytest.raises(DimensionError) as ei:
        ops.conv2d(T(np.ones((1, 1, 2, 5))), T(np.ones((1, 1, 3, 3))))
    assert ei.value.axis == "height"


@pytest.mark.parametrize("kw", [dict(stride=0), dict(pad=-1), dict(dilation=0)])
def test_conv_bad_geometry(kw):
    with pytest.raises(InputError):
        ops.conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), **kw)


# elementwise, pooling, linear ------------------------------------------------

def test_relu_definition():
    np.testing.assert_array_equal(ops.relu(T([-1, 0, 2])).data, [0, 0, 2])


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 1, 1), (3, 2, 1)])
def test_avg_pool_constant(k, stride, pad):
    y = ops.avg_pool2d(T(np.full((1, 2, 6, 6), 0.7)), k, stride, pad)
    np.testing.assert_allclose(y.data, 0.7, rtol=1e-6)


def test_max_pool_hand_example():
    assert ops.max_pool2d(T([[[[1, 2], [3, 4]]]]), 2, 2).data.item() == 4


def test_global_avg_pool():
    x = np.arange(2 * 3 * 4 * 4, dtype=np.float32).reshape(2, 3, 4, 4)
    np.testing.assert_allclose(ops.global_avg_pool(T(x)).data, x.mean(axis=(2, 3)), rtol=1e-6)


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.add(T(np.ones((2, 3))), T(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        ops.add(T(np.ones((2, 3))), T(np.ones((1, 3))), strict=True)


def test_linear_reference(rng):
    x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
    y = ops.linear(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(y.data, x @ w.T + b, rtol=1e-12)
    with pytest.raises(DimensionError):
        ops.linear(T(x), T(np.ones((3, 5))), T(b))


def test_pool_window_too_large():
    with pytest.raises(DimensionError):
        ops.max_pool2d(T(np.ones((1, 1, 2, 2))), 3, 1, 0)


# softmax / cross-entropy ------------------------------------------------------

def test_xent_uniform():
    loss, probs = ops.softmax_cross_entropy(T(np.zeros((4, 10))), [0, 3, 5, 9])
    assert loss.data.item() == pytest.approx(math.log(10), abs=1e-6)
    np.testing.assert_allclose(probs, 0.1, rtol=1e-6)


def test_xent_hand_example():
    loss, _ = ops.softmax_cross_entropy(T([[2.0, 1.0, 0.0]]), [0])
    assert loss.data.item() == pytest.approx(0.40761, abs=1e-5)


def test_xent_margin_monotone():
    losses = [ops.softmax_cross_entropy(T([[m, 0.0, 0.0]]), [0])[0].data.item() for m in (0, 1, 4, 16, 64, 200)]
    assert all(a >= b for a, b in zip(losses, losses[1:]))
    assert losses[0] > losses[1] > losses[2] > losses[3]
    assert losses[-1] < 1e-6


def test_xent_label_out_of_range():
    with pytest.raises(InputError):
        ops.softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])
    with pytest.raises(InputError):
        ops.softmax_cross_entropy(T(np.zeros((2, 3))), [-1, 0])


def test_xent_large_logits_stable():
    loss, probs = ops.softmax_cross_entropy(T([[1e4, 0, -1e4]]), [1])
    assert np.isfinite(loss.data) and np.isfinite(probs).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 2**31 - 1), st.floats(0.01, 1e3))
def test_softmax_rows_sum_to_one(n, c, seed, scale):
    z = np.random.default_rng(seed).normal(size=(n, c)).astype(np.float32) * scale
    labels = np.random.default_rng(seed).integers(0, c, n)
    loss, probs = ops.softmax_cross_entropy(T(z), labels)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(T(z), axis=1).data.sum(axis=1), 1.0, atol=1e-6)
    assert loss.data.item() >= 0


# backward ---------------------------------------------------------------------

def test_backward_linear_case():
    w = T(0.5, grad=True)
    with Tape() as tape:
        loss = ops.mul(w, T(3.0))
    backward(tape, loss, [w])
    assert w.grad.item() == pytest.approx(3.0)


def test_backward_unused_param_zero():
    w, v = T(1.0, grad=True), T([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = ops.mul(w, T(2.0))
    backward(tape, loss, [w, v])
    np.testing.assert_array_equal(v.grad, [0.0, 0.0])


def test_backward_non_scalar_root():
    x = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = ops.relu(x)
    with pytest.raises(UsageError):
        backward(tape, y)


def test_backward_non_finite_loss():
    x = T([np.inf], grad=True)
    with Tape() as tape:
        y = ops.sum(x)
    with pytest.raises(NumericFailure):
        backward(tape, y)


def test_backward_accumulates_fanout():
    x = T(2.0, grad=True)
    with Tape() as tape:
        loss = ops.add(ops.mul(x, x), x)
    backward(tape, loss, [x])
    assert x.grad.item() == pytest.approx(5.0)


def test_no_recording_outside_tape():
    x = T([1.0], grad=True)
    with Tape() as tape:
        pass
    ops.relu(x)
    assert len(tape) == 0


def test_tape_topological_and_replay(rng):
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    with Tape() as tape:
        h = ops.relu(ops.conv2d(x, w, pad=1))
        h = ops.max_pool2d(h, 2, 2)
        out = ops.mean(h)
    seen = {x.id, w.id}
    for _, ins, out_id in tape.records():
        assert all(i in seen for i in ins)
        seen.add(out_id)
    replayed = tape.replay()
    for node, arr in zip(tape.nodes, replayed):
        assert np.array_equal(node.output.data, arr)


def test_two_layer_conv_net_fd(rng):
    """Every parameter of a random two-layer conv net against central differences."""
    x = rng.normal(size=(2, 2, 6, 6))
    w1, s1, b1 = rng.normal(size=(3, 2, 3, 3)) * 0.5, rng.uniform(0.5, 1.5, 3), rng.normal(size=3) * 0.1
    w2, W, b = rng.normal(size=(4, 3, 3, 3)) * 0.5, rng.normal(size=(3, 4)), rng.normal(size=3)
    labels = np.array([0, 2])

    def net(x, w1, s1, b1, w2, W, b):
        h = ops.relu(ops.channel_affine(ops.conv2d(x, w1, 1, 1), s1, b1))
        h = ops.relu(ops.conv2d(h, w2, 2, 1))
        logits = ops.linear(ops.global_avg_pool(h), W, b)
        return ops.softmax_cross_entropy(logits, labels)[0]

    assert fd_check(net, [x, w1, s1, b1, w2, W, b], rng) < 1e-3


def test_determinism(rng):
    x = rng.normal(size=(3, 2, 5, 5)).astype(np.float32)
    w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        xt, wt = Tensor(x.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)
        with Tape() as tape:
            loss = ops.mean(ops.relu(ops.conv2d(xt, wt, 1, 1)))
        backward(tape, loss, [xt, wt])
        runs.append((loss.data.tobytes(), xt.grad.tobytes(), wt.grad.tobytes()))
    assert runs[0] == runs[1]


# sgd / training ----------------------------------------------------------------

def _param(value, grad):
    p = Tensor(np.array([value], np.float64), dtype=np.float64)
    p.grad = np.array([grad], np.float64)
    return p


def test_sgd_examples():
    p = _param(1.0, 1.0)
    sgd_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.0))
    assert p.data[0] == pytest.approx(0.9)
    p = _param(1.0, 0.0)
    sgd_step([p], TrainConfig(weight_decay=0.0))
    assert p.data[0] == 1.0
    p = _param(1.0, 1.0)
    sgd_step([p], TrainConfig(learning_rate=0.1, weight_decay=0.0005))
    assert p.data[0] == pytest.approx(0.89995, abs=1e-12)


def test_sgd_nan_gradient():
    with pytest.raises(NumericFailure):
        sgd_step([_param(1.0, float("nan"))], TrainConfig())


@pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(weight_decay=-0.1), dict(batch_size=0),
                                dict(patience=0), dict(max_epochs=3, patience=5), dict(loss="mse")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def _separable(n=200, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 2)).astype(np.float32)
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(np.int64)
    return x, y


def _linear_model(seed=0):
    r = np.random.default_rng(seed)
    W = Tensor(r.normal(size=(2, 2)) * 0.1, name="W")
    b = Tensor(np.zeros(2), name="b")
    return (lambda x: ops.linear(x, W, b)), [W, b]


def test_train_separable_reaches_095():
    x, y = _separable()
    fwd, params = _linear_model()
    train_loop(fwd, params, (x, y), None, TrainConfig(max_epochs=30, patience=10, batch_size=32))
    acc = (fwd(Tensor(x)).data.argmax(1) == y).mean()
    assert acc >= 0.95


def test_train_frozen_network_stops_after_two_epochs():
    x, y = _separable()
    fwd, params = _linear_model()
    hist = train_loop(fwd, params, (x, y), (x, y), TrainConfig(learning_rate=0.0, max_epochs=20, patience=1))
    assert hist.epochs_run == 2 and hist.early_stopped


def test_train_identical_seeds_identical_history():
    x, y = _separable()
    hists = []
    for _ in range(2):
        fwd, params = _linear_model()
        hists.append(train_loop(fwd, params, (x, y), (x[:50], y[:50]), TrainConfig(max_epochs=5, patience=5, batch_size=16)))
    assert hists[0].train_loss == hists[1].train_loss and hists[0].val_loss == hists[1].val_loss


def test_train_empty_dataset():
    fwd, params = _linear_model()
    with pytest.raises(InputError):
        train_loop(fwd, params, (np.zeros((0, 2), np.float32), np.zeros(0, np.int64)), None, TrainConfig())


def test_train_restores_best_snapshot():
    x, y = _separable()
    fwd, params = _linear_model()
    hist = train_loop(fwd, params, (x, y), (x, y), TrainConfig(learning_rate=5.0, max_epochs=8, patience=8, batch_size=8))
    from blockrepair.engine.train import evaluate_loss
    assert evaluate_loss(fwd, x, y)[0] == pytest.approx(min(hist.val_loss), rel=1e-6)


def test_keep_initial_never_worse():
    x, y = _separable()
    fwd, params = _linear_model()
    train_loop(fwd, params, (x, y), None, TrainConfig(max_epochs=20, patience=20, batch_size=16))
    from blockrepair.engine.train import evaluate_loss
    before = evaluate_loss(fwd, x, y)[0]
    train_loop(fwd, params, (x, y), (x, y), TrainConfig(learning_rate=50.0, max_epochs=3, patience=3), keep_initial=True)
    assert evaluate_loss(fwd, x, y)[0] <= before + 1e-7
