# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv gather/scatter kernels.

Loop orders mirror ``_pykernels`` so the floating-point sums are identical.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    out = np.empty((n, c * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        base = oy * wo
                        for ox in range(wo):
                            ov[b, row, base + ox] = xv[b, ch, i + oy * stride, j + ox * stride]
    return out


def col2im(cols, shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1
    cdef Py_ssize_t wo = (w - kw) // stride + 1
    cdef double[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(n, c * kh * kw, ho * wo)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, base
    # same (i, j) accumulation order as the numpy slice loop
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        base = oy * wo
                        for ox in range(wo):
                            ov[b, ch, i + oy * stride, j + ox * stride] += cv[b, row, base + ox]
    return out


def scatter_add(Py_ssize_t size, index, values):
    cdef cnp.intp_t[::1] iv = np.ascontiguousarray(index, dtype=np.intp).ravel()
    cdef double[::1] vv = np.ascontiguousarray(values, dtype=np.float64).ravel()
    out = np.zeros(size, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t k
    for k in range(iv.shape[0]):
        ov[iv[k]] += vv[k]
    return out
