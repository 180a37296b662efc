"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Summation order matches the compiled loops element for element, so the two
backends agree bit for bit.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def maxpool2_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(g, arg):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(dx, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    dx = dx.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, 2 * ho, 2 * wo))


def upsample2_forward(x):
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2_backward(g):
    return np.ascontiguousarray(
        ((g[:, :, 0::2, 0::2] + g[:, :, 0::2, 1::2]) + g[:, :, 1::2, 0::2]) + g[:, :, 1::2, 1::2]
    )
