import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacc import _backend, _kernels_py

compiled = pytest.importorskip("cacc._kernels")


@pytest.fixture(params=[np.float32, np.float64])
def dtype(request):
    return request.param


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(3, 9), w=st.integers(3, 9),
    k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2), seed=st.integers(0, 2**16),
)
def test_im2col_col2im_bit_identical(n, c, h, w, k, stride, seed):
    pad = k // 2
    rng = np.random.default_rng(seed)
    for dt in (np.float32, np.float64):
        x = rng.standard_normal((n, c, h, w)).astype(dt)
        a = compiled.im2col(x, k, stride, pad)
        b = _kernels_py.im2col(x, k, stride, pad)
        assert a.dtype == b.dtype == dt
        assert np.array_equal(a, b)
        cols = rng.standard_normal(a.shape).astype(dt)
        assert np.array_equal(compiled.col2im(cols, x.shape, k, stride, pad),
                              _kernels_py.col2im(cols, x.shape, k, stride, pad))


def test_pool_and_upsample_bit_identical(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 6)).astype(dtype)
    x[0, 0, :2, :2] = 1.0  # ties resolve to the first position in both
    ya, aa = compiled.maxpool2_forward(x)
    yb, ab = _kernels_py.maxpool2_forward(x)
    assert np.array_equal(ya, yb) and np.array_equal(aa, ab)
    g = rng.standard_normal(ya.shape).astype(dtype)
    assert np.array_equal(compiled.maxpool2_backward(g, aa), _kernels_py.maxpool2_backward(g, ab))
    assert np.array_equal(compiled.upsample2_forward(x), _kernels_py.upsample2_forward(x))
    assert np.array_equal(compiled.upsample2_backward(x), _kernels_py.upsample2_backward(x))


def test_backend_switch_gives_identical_training_step():
    from cacc.adapt import CounterNet
    from cacc.tensor import Tensor

    x = np.random.default_rng(1).random((1, 1, 32, 32)).astype(np.float32)
    grads = {}
    before = _backend.active()
    try:
        for name in _backend.available():
            _backend.use(name)
            net = CounterNet(seed=5)
            den, _ = net(Tensor(x))
            den.sum().backward()
            grads[name] = [p.grad for p in net.parameters()]
    finally:
        _backend.use(before)
    assert set(grads) == {"compiled", "python"}
    for a, b in zip(grads["compiled"], grads["python"]):
        assert np.array_equal(a, b)


def test_unknown_backend():
    with pytest.raises(ValueError):
        _backend.use("fortran")
