# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the tensor core.

Every routine mirrors one in ``_kernels_py`` and performs its floating-point
additions in the same order, so both backends produce bit-identical output.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest o >= 0 with o * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t size,
                                  Py_ssize_t count) nogil:
    # one past the largest o < count with o * stride + offset < size
    cdef Py_ssize_t room = size - 1 - offset
    if room < 0:
        return 0
    return min(count, room // stride + 1)


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c * k * k, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ci, ki, kj, oy, ox, iy, ix, row, ox0, ox1
    with nogil:
        for b in range(n):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        ox0 = _first_valid(kj - pad, stride)
                        ox1 = _end_valid(kj - pad, stride, w, wo)
                        for oy in range(_first_valid(ki - pad, stride), _end_valid(ki - pad, stride, h, ho)):
                            iy = oy * stride + ki - pad
                            for ox in range(ox0, ox1):
                                cols[b, row, oy * wo + ox] = x[b, ci, iy, ox * stride + kj - pad]
    return out


def col2im(floating[:, :, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, ki, kj, oy, ox, iy, ix, row, ox0, ox1
    with nogil:
        for b in range(n):
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ci * k + ki) * k + kj
                        ox0 = _first_valid(kj - pad, stride)
                        ox1 = _end_valid(kj - pad, stride, w, wo)
                        for oy in range(_first_valid(ki - pad, stride), _end_valid(ki - pad, stride, h, ho)):
                            iy = oy * stride + ki - pad
                            for ox in range(ox0, ox1):
                                ix = ox * stride + kj - pad
                                dx[b, ci, iy, ix] = dx[b, ci, iy, ix] + cols[b, row, oy * wo + ox]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] y = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, ci, oy, ox
    cdef floating best, v
    cdef cnp.int8_t idx
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[b, ci, 2 * oy, 2 * ox]
                        idx = 0
                        v = x[b, ci, 2 * oy, 2 * ox + 1]
                        if v > best:
                            best = v
                            idx = 1
                        v = x[b, ci, 2 * oy + 1, 2 * ox]
                        if v > best:
                            best = v
                            idx = 2
                        v = x[b, ci, 2 * oy + 1, 2 * ox + 1]
                        if v > best:
                            best = v
                            idx = 3
                        y[b, ci, oy, ox] = best
                        a[b, ci, oy, ox] = idx
    return out, arg


def maxpool2_backward(floating[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] arg):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, oy, ox
    cdef cnp.int8_t idx
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        idx = arg[b, ci, oy, ox]
                        dx[b, ci, 2 * oy + idx // 2, 2 * ox + idx % 2] = g[b, ci, oy, ox]
    return out


def upsample2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ci, iy, ix
    cdef floating v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for iy in range(h):
                    for ix in range(w):
                        v = x[b, ci, iy, ix]
                        y[b, ci, 2 * iy, 2 * ix] = v
                        y[b, ci, 2 * iy, 2 * ix + 1] = v
                        y[b, ci, 2 * iy + 1, 2 * ix] = v
                        y[b, ci, 2 * iy + 1, 2 * ix + 1] = v
    return out


def upsample2_backward(floating[:, :, :, ::1] g):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h = g.shape[2] // 2, w = g.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, iy, ix
    with nogil:
        for b in range(n):
            for ci in range(c):
                for iy in range(h):
                    for ix in range(w):
                        dx[b, ci, iy, ix] = ((g[b, ci, 2 * iy, 2 * ix]
                                              + g[b, ci, 2 * iy, 2 * ix + 1])
                                             + g[b, ci, 2 * iy + 1, 2 * ix]) \
                                            + g[b, ci, 2 * iy + 1, 2 * ix + 1]
    return out
