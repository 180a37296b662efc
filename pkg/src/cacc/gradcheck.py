"""Central finite-difference checks for the autodiff core (64-bit)."""

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, arrays, index, h=1e-5):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + h
        up = fn(arrays)
        base[i] = orig - h
        down = fn(arrays)
        base[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    """``||a - b|| / max(||a||, ||b||)``, 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_gradients(build, arrays, h=1e-5):
    """Compare analytic and numerical gradients of a scalar-valued graph.

    ``build`` takes a list of Tensors (one per array, all float64 and
    requiring grad) and returns a scalar Tensor. Returns the worst relative
    error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    out.backward()

    def value(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, relative_error(analytic, numerical_grad(value, arrays, k, h)))
    return worst


def check_tensor_gradients(loss_fn, tensors, h=1e-5, max_entries=None, seed=0, scale=1.0):
    """Like :func:`check_gradients` but perturbs existing tensors in place.

    ``loss_fn()`` rebuilds the scalar loss from the current values of
    ``tensors`` (float64, requiring grad), e.g. module parameters. With
    ``max_entries`` only a random subset of each tensor's entries is probed.
    Backpropagated gradients are compared with ``scale`` times the numerical
    ones; tensors reached only through a reversal layer of factor ``l`` need
    ``scale=-l``.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        worst = max(worst, relative_error(a.reshape(-1)[idx], scale * num))
    for t in tensors:
        t.grad = None
    return worst
