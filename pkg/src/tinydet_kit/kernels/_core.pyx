# cython: language_level=3
"""Compiled convolution core.

Statement-for-statement mirror of ``_pure``: identical loop nesting and
accumulation order, compiled with -ffp-contract=off, so results are
bit-identical to the pure-Python backend.
"""

import numpy as np

BACKEND_NAME = "compiled"


def conv2d_raw(const double[:, :, :, ::1] x, const double[:, :, :, ::1] weight, bias,
               Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t groups):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t co = weight.shape[0], cig = weight.shape[1], k = weight.shape[2]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.empty((nb, co, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef const double[::1] bias_view
    cdef bint has_bias = bias is not None
    if has_bias:
        bias_view = bias
    cdef Py_ssize_t ocpg = co // groups
    cdef Py_ssize_t bi, g, ocg, oc, oh, ow, ic, i, j, ih, iw
    cdef double acc, base
    for bi in range(nb):
        for g in range(groups):
            for ocg in range(ocpg):
                oc = g * ocpg + ocg
                base = bias_view[oc] if has_bias else 0.0
                for oh in range(ho):
                    for ow in range(wo):
                        acc = base
                        for ic in range(cig):
                            for i in range(k):
                                ih = oh * stride + i - pad
                                if 0 <= ih < h:
                                    for j in range(k):
                                        iw = ow * stride + j - pad
                                        if 0 <= iw < w:
                                            acc += x[bi, g * cig + ic, ih, iw] * weight[oc, ic, i, j]
                        out[bi, oc, oh, ow] = acc
    return out_arr


def avgpool2_raw(const double[:, :, :, ::1] x):
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    out_arr = np.empty((nb, nc, h - 1, w - 1), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, c, i, j
    for bi in range(nb):
        for c in range(nc):
            for i in range(h - 1):
                for j in range(w - 1):
                    out[bi, c, i, j] = ((x[bi, c, i, j] + x[bi, c, i, j + 1])
                                        + (x[bi, c, i + 1, j] + x[bi, c, i + 1, j + 1])) * 0.25
    return out_arr
