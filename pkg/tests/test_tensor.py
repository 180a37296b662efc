import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacc import nn
from cacc import tensor as T
from cacc.gradcheck import check_gradients, numerical_grad, relative_error
from cacc.tensor import NonFiniteError, Tensor


def reference_conv(x, w, b, pad):
    """Direct nested-loop cross-correlation, stride 1."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[co]
                    for ci in range(cin):
                        for a in range(k):
                            for c in range(k):
                                acc += w[co, ci, a, c] * xp[bi, ci, i + a, j + c]
                    out[bi, co, i, j] = acc
    return out


def test_identity_conv():
    x = np.random.default_rng(0).random((1, 1, 5, 5))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None)
    np.testing.assert_array_equal(out.data, x)


def test_relu_definition():
    out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv_matches_nested_loops():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    np.testing.assert_allclose(out.data, reference_conv(x, w, b, 1), rtol=1e-12, atol=1e-12)


def test_strided_conv_shape():
    x = Tensor(np.zeros((1, 2, 8, 8)))
    out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), None, stride=2, padding=1)
    assert out.shape == (1, 3, 4, 4)


@pytest.mark.parametrize("bad", [
    lambda: T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3)))),
    lambda: T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2)))),
    lambda: T.maxpool2(Tensor(np.zeros((1, 1, 5, 4)))),
    lambda: T.softmax2(Tensor(np.zeros(3))),
])
def test_shape_errors(bad):
    with pytest.raises(ValueError):
        bad()


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.relu(Tensor(np.array([np.nan])))


def test_backward_without_graph():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(3), requires_grad=True).backward(np.ones(3))


def test_backward_grad_shape_mismatch():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.relu(x).backward(np.ones(4))


def test_grad_reverse_identity_and_negation():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = T.grad_reverse(x, 0.7)
    np.testing.assert_array_equal(y.data, x.data)
    g = np.array([0.5, 1.0, -4.0])
    y.backward(g)
    np.testing.assert_array_equal(x.grad, -0.7 * g)


def test_grad_reverse_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        nn.LayerSpec("grad-reverse", grl_scale=0.0)


@pytest.mark.parametrize("pair,expected", [
    ((0.0, 0.0), (0.5, 0.5)),
    ((7.5, 7.5), (0.5, 0.5)),
    ((2.0, 0.0), (0.8808, 0.1192)),
])
def test_softmax2_examples(pair, expected):
    p = T.softmax2(Tensor(np.array(pair))).data
    np.testing.assert_allclose(p, expected, atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-700, 700), st.floats(-700, 700))
def test_softmax2_sums_to_one(a, b):
    p = T.softmax2(Tensor(np.array([a, b]))).data
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) < 1e-12


def test_accumulates_over_shared_inputs():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


# -- finite differences, one case per layer kind ----------------------------------------

RNG = np.random.default_rng(42)


def _weights(shape):
    return RNG.standard_normal(shape) * 0.5


LAYER_CASES = {
    "conv2d": (lambda t: (T.conv2d(t[0], t[1], t[2]) * t[3]).sum(),
               [RNG.standard_normal((2, 2, 6, 7)), _weights((3, 2, 3, 3)), _weights(3), RNG.standard_normal((2, 3, 6, 7))]),
    "conv2d-strided": (lambda t: (T.conv2d(t[0], t[1], t[2], stride=2, padding=1) * t[3]).sum(),
                       [RNG.standard_normal((1, 2, 8, 8)), _weights((2, 2, 3, 3)), _weights(2), RNG.standard_normal((1, 2, 4, 4))]),
    "maxpool2": (lambda t: (T.maxpool2(t[0]) * t[1]).sum(),
                 [RNG.standard_normal((2, 2, 8, 6)), RNG.standard_normal((2, 2, 4, 3))]),
    "upsample2": (lambda t: (T.upsample2(t[0]) * t[1]).sum(),
                  [RNG.standard_normal((1, 2, 3, 4)), RNG.standard_normal((1, 2, 6, 8))]),
    "relu": (lambda t: (T.relu(t[0]) * t[1]).sum(),
             [RNG.standard_normal((2, 6, 6)), RNG.standard_normal((2, 6, 6))]),
    "sigmoid": (lambda t: (T.sigmoid(t[0]) * t[1]).sum(),
                [RNG.standard_normal((6, 6)) * 3, RNG.standard_normal((6, 6))]),
    "softmax2": (lambda t: (T.softmax2(t[0]) * t[1]).sum(),
                 [RNG.standard_normal((7, 2)) * 2, RNG.standard_normal((7, 2))]),
    "log_softmax2": (lambda t: (T.log_softmax2(t[0]) * t[1]).sum(),
                     [RNG.standard_normal((7, 2)) * 2, RNG.standard_normal((7, 2))]),
    "global-avg-pool": (lambda t: (T.global_avg_pool(t[0]) * t[1]).sum(),
                        [RNG.standard_normal((2, 3, 6, 8)), RNG.standard_normal((2, 3))]),
    "linear": (lambda t: (T.linear(t[0], t[1], t[2]) * t[3]).sum(),
               [RNG.standard_normal((4, 6)), _weights((6, 3)), _weights(3), RNG.standard_normal((4, 3))]),
    "bce": (lambda t: T.bce_with_logits(t[0], np.array([[1.0], [0.0], [1.0]])).sum(),
            [RNG.standard_normal((3, 1)) * 3]),
    "square-log-mean": (lambda t: T.log(T.square(t[0]) + 1.0).mean(),
                        [RNG.standard_normal((6, 6))]),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(name):
    build, arrays = LAYER_CASES[name]
    assert check_gradients(build, arrays) < 1e-4


def test_grad_reverse_is_scaled_negative_of_finite_differences():
    x = RNG.standard_normal((6, 6))
    weights = RNG.standard_normal((6, 6))
    leaf = Tensor(x.copy(), requires_grad=True)
    T.square(T.grad_reverse(leaf, 1.5) * weights).sum().backward()
    fd = numerical_grad(lambda a: float((T.square(Tensor(a[0]) * weights).sum()).data), [x.copy()], 0)
    assert relative_error(leaf.grad, -1.5 * fd) < 1e-4


def test_layer_spec_builds_every_kind():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
    conv = nn.build_layer(nn.LayerSpec("conv2d", 2, 4, 3), rng)
    assert nn.forward(conv, x).shape == (1, 4, 8, 8)
    assert nn.forward(nn.build_layer(nn.LayerSpec("maxpool2")), x).shape == (1, 2, 4, 4)
    assert nn.forward(nn.build_layer(nn.LayerSpec("upsample2")), x).shape == (1, 2, 16, 16)
    assert nn.forward(nn.build_layer(nn.LayerSpec("global-avg-pool")), x).shape == (1, 2)
    lin = nn.build_layer(nn.LayerSpec("linear", 2, 5), rng)
    assert nn.forward(lin, Tensor(np.ones((3, 2), dtype=np.float32))).shape == (3, 5)
    with pytest.raises(ValueError):
        nn.LayerSpec("conv2d", 1, 1, kernel_size=4)
    with pytest.raises(ValueError):
        nn.LayerSpec("deconv")


def test_glorot_bound():
    conv = nn.Conv2d(4, 8, 3, rng=np.random.default_rng(0))
    bound = np.sqrt(6.0 / (4 * 9 + 8 * 9))
    assert np.abs(conv.weight.data).max() <= bound
    assert np.abs(conv.weight.data).max() > 0.9 * bound


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(3)
        net = nn.Sequential(nn.Conv2d(1, 4, 3, rng=rng), nn.ReLU(), nn.MaxPool2(), nn.Upsample2(),
                            nn.Conv2d(4, 1, 3, rng=rng))
        x = Tensor(rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
        net(x).sum().backward()
        return [p.grad.copy() for p in net.parameters()]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad
