import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diqa import nn
from diqa.nn import DimensionError, GraphError, Tensor

from .conftest import check_grads, leaf


def naive_conv(x, w, b):
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for ky in range(3):
                        for kx in range(3):
                            y, xx = i + ky - 1, j + kx - 1
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[o, c, ky, kx] * x[c, y, xx]
                out[o, i, j] = acc
    return out


# -- conv -------------------------------------------------------------------------

def test_conv_zero_input_gives_bias():
    b = np.array([0.5, -2.0, 3.0], dtype=np.float32)
    w = np.random.default_rng(0).normal(size=(3, 2, 3, 3)).astype(np.float32)
    out = nn.conv3x3(Tensor(np.zeros((2, 4, 5), np.float32)), Tensor(w), Tensor(b))
    assert out.shape == (3, 4, 5)
    for c in range(3):
        assert np.all(out.data[c] == b[c])


def test_conv_padding_arithmetic():
    out = nn.conv3x3(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.data[0, 1, 1] == 9
    for r, c in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert out.data[0, r, c] == 4
    assert out.data[0, 0, 1] == 6


@pytest.mark.parametrize("size", [5, 16, 18])
def test_conv_matches_naive_loops(rng, size):
    c_in = 2 if size == 5 else 16  # 16 channels on >=16 maps exercises the shifted-GEMM path
    x = rng.normal(size=(c_in, size, size))
    w = rng.normal(size=(3, c_in, 3, 3))
    b = rng.normal(size=3)
    got = nn.conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, naive_conv(x, w, b), atol=1e-6 * max(1, np.abs(got).max()))


def test_conv_batched_equals_single(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w, b = rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    batched = nn.conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], nn.conv3x3(Tensor(x[i]), Tensor(w), Tensor(b)).data, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(DimensionError, match="channel"):
        nn.conv3x3(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError, match="bias"):
        nn.conv3x3(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(2)))


def test_conv_is_linear_without_bias(rng):
    x, y = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    w, zero = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(np.zeros(3))
    lhs = nn.conv3x3(Tensor(2.0 * x - 3.0 * y), w, zero).data
    rhs = 2.0 * nn.conv3x3(Tensor(x), w, zero).data - 3.0 * nn.conv3x3(Tensor(y), w, zero).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# -- maxpool ----------------------------------------------------------------------

def test_maxpool_small():
    out = nn.maxpool2x2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])))
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_constant():
    out = nn.maxpool2x2(Tensor(np.full((2, 4, 6), 7.5)))
    assert out.shape == (2, 2, 3)
    assert np.all(out.data == 7.5)


def test_maxpool_window_scan(rng):
    x = rng.normal(size=(1, 8, 8))
    out = nn.maxpool2x2(Tensor(x)).data
    for i in range(4):
        for j in range(4):
            window = [x[0, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1)]
            assert out[0, i, j] == max(window)


def test_maxpool_nhwc_agrees(rng):
    x = rng.normal(size=(2, 3, 8, 4))
    a = nn.maxpool2x2(Tensor(x)).data
    b = nn.maxpool2x2_nhwc(Tensor(x.transpose(0, 2, 3, 1))).data.transpose(0, 3, 1, 2)
    np.testing.assert_array_equal(a, b)


def test_maxpool_odd_size():
    with pytest.raises(DimensionError):
        nn.maxpool2x2(Tensor(np.zeros((1, 3, 4))))
    with pytest.raises(DimensionError):
        nn.maxpool2x2_nhwc(Tensor(np.zeros((1, 4, 3, 1))))


@pytest.mark.parametrize("op", [nn.maxpool2x2, lambda t: nn.maxpool2x2_nhwc(nn.reshape(t, (1, 2, 2, 1)))])
def test_maxpool_routes_gradient_to_argmax(op):
    x = leaf([[[1.0, 2.0], [3.0, 4.0]]])
    op(x).sum().backward()
    assert x.grad.tolist() == [[[0.0, 0.0], [0.0, 1.0]]]


# -- relu / fc / dropout ----------------------------------------------------------

def test_relu_values():
    assert nn.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert np.all(nn.relu(Tensor(-np.arange(1.0, 6.0))).data == 0)


def test_relu_gradient_matches_finite_difference(rng):
    x = leaf([-1.0, 2.0])
    nn.relu(x).sum().backward()
    assert x.grad.tolist() == [0.0, 1.0]
    check_grads(lambda: nn.relu(x).sum(), [x], rng)


def test_fc_identity_and_bias():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(nn.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    b = np.array([4.0, 5.0])
    assert np.array_equal(nn.linear(Tensor(x), Tensor(np.zeros((2, 3))), Tensor(b)).data, b)


def test_fc_matches_hand_matmul(rng):
    x, w, b = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
    expected = [b[o] + sum(w[o, i] * x[i] for i in range(4)) for o in range(3)]
    np.testing.assert_allclose(nn.linear(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-12)
    with pytest.raises(DimensionError):
        nn.linear(Tensor(np.zeros(5)), Tensor(w), Tensor(b))


def test_dropout_eval_scales():
    out = nn.dropout(Tensor([2.0, 4.0]), 0.5, train=False)
    assert out.data.tolist() == [1.0, 2.0]


def test_dropout_keep_one_is_identity(rng):
    x = Tensor(rng.normal(size=10))
    assert np.array_equal(nn.dropout(x, 1.0, train=True, rng=rng).data, x.data)


def test_dropout_train_rate_and_no_rescale():
    out = nn.dropout(Tensor(np.ones(100_000)), 0.5, train=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert 0.48 <= out.mean() <= 0.52


def test_dropout_backward_uses_forward_mask(rng):
    x = leaf(np.ones(50))
    out = nn.dropout(x, 0.5, train=True, rng=rng)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, out.data)


def test_dropout_rejects_bad_keep():
    with pytest.raises(ValueError):
        nn.dropout(Tensor([1.0]), 0.0, train=False)


# -- backward ---------------------------------------------------------------------

def test_backward_without_forward_raises():
    with pytest.raises(GraphError):
        leaf([1.0]).backward()


def test_backward_identity_sum():
    x = leaf(np.arange(6.0).reshape(2, 3))
    nn.reshape(x, (6,)).sum().backward()
    assert np.all(x.grad == 1.0)


def test_gradient_accumulates_over_shared_use():
    x = leaf([3.0])
    (x * x + x).sum().backward()
    assert x.grad.tolist() == [7.0]


@pytest.mark.parametrize("size", [6, 16])
def test_conv_gradients(rng, size):
    c_in = 2 if size == 6 else 16
    x = leaf(rng.normal(size=(2, c_in, size, size)))
    w = leaf(rng.normal(size=(3, c_in, 3, 3)) * 0.3)
    b = leaf(rng.normal(size=3))
    target = rng.normal(size=(2, 3, size, size))
    check_grads(lambda: (nn.conv3x3(x, w, b) * target).sum(), [x, w, b], rng)


def test_maxpool_gradients(rng):
    x = leaf(rng.normal(size=(2, 3, 4, 4)))
    target = rng.normal(size=(2, 3, 2, 2))
    check_grads(lambda: (nn.maxpool2x2(x) * target).sum(), [x], rng)
    y = leaf(rng.normal(size=(2, 4, 4, 3)))
    check_grads(lambda: (nn.maxpool2x2_nhwc(y) * target.transpose(0, 2, 3, 1)).sum(), [y], rng)


def test_fc_gradients(rng):
    x, w, b = leaf(rng.normal(size=(5, 4))), leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=3))
    target = rng.normal(size=(5, 3))
    check_grads(lambda: (nn.linear(x, w, b) * target).sum(), [x, w, b], rng)


def test_dropout_gradients(rng):
    x = leaf(rng.normal(size=20))
    seed = 5
    check_grads(lambda: (nn.dropout(x, 0.5, True, np.random.default_rng(seed)) * 3.0).sum(), [x], rng)


def test_two_layer_net_gradients(rng):
    x = leaf(rng.normal(size=(3, 2, 4, 4)))
    w1, b1 = leaf(rng.normal(size=(4, 2, 3, 3)) * 0.4), leaf(rng.normal(size=4) * 0.1)
    w2, b2 = leaf(rng.normal(size=(1, 16)) * 0.3), leaf(rng.normal(size=1) * 0.1)

    def loss():
        h = nn.maxpool2x2(nn.relu(nn.conv3x3(x, w1, b1)))
        out = nn.linear(nn.reshape(h, (3, 16)), w2, b2)
        return abs(out - 1.5).mean()

    check_grads(loss, [x, w1, b1, w2, b2], rng, per_tensor=10)


def test_elementwise_gradients(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.uniform(1, 2, size=(2, 1)))
    check_grads(lambda: ((a / b) * a - b).mean() + nn.concat([a, b], axis=1).sum(), [a, b], rng)


# -- properties -------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)))
def test_shapes_conserved(x):
    w, b = Tensor(np.ones((3, 2, 3, 3))), Tensor(np.zeros(3))
    out = nn.conv3x3(Tensor(x), w, b)
    assert out.shape == (3, 4, 4)
    pooled = nn.maxpool2x2(out)
    assert pooled.shape == (3, 2, 2)
    assert np.all(np.isfinite(pooled.data))


def test_forward_backward_deterministic(rng):
    x = rng.normal(size=(2, 2, 8, 8)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)

    def run():
        wt = Tensor(w.copy(), requires_grad=True)
        out = nn.maxpool2x2(nn.relu(nn.conv3x3(Tensor(x), wt, Tensor(np.zeros(3, np.float32)))))
        out.sum().backward()
        return out.data.tobytes(), wt.grad.tobytes()

    assert run() == run()


def test_paramset_basics():
    ps = nn.ParamSet()
    ps["a"] = Tensor(np.zeros((2, 3)), requires_grad=True)
    ps["b"] = Tensor(np.zeros(4), requires_grad=True)
    assert list(ps) == ["a", "b"] and ps.count() == 10
    assert ps["a"].name == "a"
    with pytest.raises(TypeError):
        ps["c"] = np.zeros(2)
    clone = ps.copy()
    clone["a"].data[0, 0] = 1.0
    assert ps["a"].data[0, 0] == 0.0


def test_activation_pattern_records_and_replays():
    x = Tensor(np.array([-1.0, 2.0, 0.5]))
    with nn.activation_pattern() as pattern:
        nn.relu(x)
    assert pattern[0].tolist() == [False, True, True]
    shifted = Tensor(np.array([1.0, -2.0, 0.5]))
    with nn.activation_pattern(pattern):
        out = nn.relu(shifted)
    assert out.data.tolist() == [0.0, -2.0, 0.5]
    assert nn.same_pattern(pattern, pattern) and not nn.same_pattern(pattern, [])
    with pytest.raises(nn.GraphError):
        with nn.activation_pattern(pattern):
            nn.relu(Tensor(np.zeros(4)))


def test_maxpool_replay_forces_argmax():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    with nn.activation_pattern() as pattern:
        nn.maxpool2x2(x)
    y = Tensor(np.array([[[9.0, 2.0], [3.0, 4.0]]]))
    with nn.activation_pattern(pattern):
        assert nn.maxpool2x2(y).data.item() == 4.0
    assert nn.maxpool2x2(y).data.item() == 9.0
