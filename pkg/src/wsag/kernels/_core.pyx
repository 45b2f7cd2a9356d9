# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled masked 3x3 convolution kernels.

Same contract as pyref: zero padding, stride 1, output multiplied by the
validity mask, inputs assumed pre-masked. im2col runs as tight C loops into
a reusable buffer and the contraction is a single BLAS GEMM, which is where
the pure-numpy path loses most of its time (strided transpose copies).
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "compiled"

ctypedef fused real:
    double
    float


cdef void _gemm_rm(real* a, real* b, real* c,
                   int m, int n, int k, real beta) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(k,n) [+ beta*C], via column-major BLAS:
    # C_cm(n,m) = B_cm(n,k) @ A_cm(k,m)
    cdef char nt = b'N'
    cdef double alpha_d = 1.0, beta_d
    cdef float alpha_s = 1.0, beta_s
    if real is double:
        beta_d = <double> beta
        dgemm(&nt, &nt, &n, &m, &k, &alpha_d, <double*> b, &n,
              <double*> a, &k, &beta_d, <double*> c, &n)
    else:
        beta_s = <float> beta
        sgemm(&nt, &nt, &n, &m, &k, &alpha_s, <float*> b, &n,
              <float*> a, &k, &beta_s, <float*> c, &n)


cdef void _gemm_rm_tn(real* a, real* b, real* c,
                      int m, int n, int k) noexcept nogil:
    # row-major C(m,n) = A(k,m)^T @ B(k,n):
    # C_cm(n,m) = B_cm(n,k) @ A_cm(m,k)^T
    cdef char nt = b'N', tt = b'T'
    cdef double alpha_d = 1.0, beta_d = 0.0
    cdef float alpha_s = 1.0, beta_s = 0.0
    if real is double:
        dgemm(&nt, &tt, &n, &m, &k, &alpha_d, <double*> b, &n,
              <double*> a, &m, &beta_d, <double*> c, &n)
    else:
        sgemm(&nt, &tt, &n, &m, &k, &alpha_s, <float*> b, &n,
              <float*> a, &m, &beta_s, <float*> c, &n)


cdef void _gemm_rm_nt(real* a, real* b, real* c,
                      int m, int n, int k) noexcept nogil:
    # row-major C(m,n) = A(m,k) @ B(n,k)^T:
    # C_cm(n,m) = B_cm(k,n)^T @ A_cm(k,m)
    cdef char nt = b'N', tt = b'T'
    cdef double alpha_d = 1.0, beta_d = 0.0
    cdef float alpha_s = 1.0, beta_s = 0.0
    if real is double:
        dgemm(&tt, &nt, &n, &m, &k, &alpha_d, <double*> b, &k,
              <double*> a, &k, &beta_d, <double*> c, &n)
    else:
        sgemm(&tt, &nt, &n, &m, &k, &alpha_s, <float*> b, &k,
              <float*> a, &k, &beta_s, <float*> c, &n)


cdef void _im2col(real[:, :, :, ::1] x, real[:, ::1] cols) noexcept nogil:
    # cols[((b*n + i)*m + j), (dy*3 + dx)*c + ci] = x[b, i+dy-1, j+dx-1, ci]
    cdef Py_ssize_t bs = x.shape[0], n = x.shape[1], m = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t b, i, j, dy, dx, ci, si, sj, r, q
    for b in range(bs):
        for i in range(n):
            for j in range(m):
                r = (b * n + i) * m + j
                for dy in range(3):
                    si = i + dy - 1
                    for dx in range(3):
                        sj = j + dx - 1
                        q = (dy * 3 + dx) * c
                        if 0 <= si < n and 0 <= sj < m:
                            for ci in range(c):
                                cols[r, q + ci] = x[b, si, sj, ci]
                        else:
                            for ci in range(c):
                                cols[r, q + ci] = 0


cdef void _col2im(real[:, ::1] cols, real[:, :, :, ::1] out) noexcept nogil:
    # adjoint of _im2col: scatter-add each column block back to its source cell
    cdef Py_ssize_t bs = out.shape[0], n = out.shape[1], m = out.shape[2], c = out.shape[3]
    cdef Py_ssize_t b, i, j, dy, dx, ci, si, sj, r, q
    for b in range(bs):
        for i in range(n):
            for j in range(m):
                r = (b * n + i) * m + j
                for dy in range(3):
                    si = i + dy - 1
                    if si < 0 or si >= n:
                        continue
                    for dx in range(3):
                        sj = j + dx - 1
                        if sj < 0 or sj >= m:
                            continue
                        q = (dy * 3 + dx) * c
                        for ci in range(c):
                            out[b, si, sj, ci] += cols[r, q + ci]


cdef void _bias_mask(real[:, :, :, ::1] y, real[::1] b, real[:, ::1] mask) noexcept nogil:
    cdef Py_ssize_t bs = y.shape[0], n = y.shape[1], m = y.shape[2], c = y.shape[3]
    cdef Py_ssize_t bi, i, j, ci
    cdef real mv
    for bi in range(bs):
        for i in range(n):
            for j in range(m):
                mv = mask[i, j]
                for ci in range(c):
                    y[bi, i, j, ci] = (y[bi, i, j, ci] + b[ci]) * mv


cdef void _mul_mask(real[:, :, :, ::1] y, real[:, ::1] mask) noexcept nogil:
    cdef Py_ssize_t bs = y.shape[0], n = y.shape[1], m = y.shape[2], c = y.shape[3]
    cdef Py_ssize_t bi, i, j, ci
    cdef real mv
    for bi in range(bs):
        for i in range(n):
            for j in range(m):
                mv = mask[i, j]
                for ci in range(c):
                    y[bi, i, j, ci] = y[bi, i, j, ci] * mv


def _prep(arr, dtype):
    return np.ascontiguousarray(arr, dtype=dtype)


import threading

_scratch = threading.local()


def _buf(tag, shape, dtype):
    # reusable scratch; fresh allocation per call would page-fault ~100MB each time
    size = int(np.prod(shape))
    store = getattr(_scratch, "bufs", None)
    if store is None:
        store = _scratch.bufs = {}
    key = (tag, np.dtype(dtype).str)
    arr = store.get(key)
    if arr is None or arr.size < size:
        arr = store[key] = np.empty(size, dtype=dtype)
    return arr[:size].reshape(shape)


cdef _forward_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                   real[::1] b, real[:, ::1] mask,
                   real[:, ::1] cols, real[:, :, :, ::1] out):
    cdef Py_ssize_t rows = x.shape[0] * x.shape[1] * x.shape[2]
    cdef Py_ssize_t k = 9 * x.shape[3], co = w.shape[3]
    with nogil:
        _im2col(x, cols)
        _gemm_rm(&cols[0, 0], &w[0, 0, 0, 0], &out[0, 0, 0, 0],
                 <int> rows, <int> co, <int> k, <real> 0.0)
        _bias_mask(out, b, mask)


cdef _backward_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, ::1] mask, real[:, :, :, ::1] gy,
                    real[:, ::1] cols, real[:, ::1] gcols,
                    real[:, :, :, ::1] gx, real[:, :, :, ::1] gw,
                    real[::1] gb):
    cdef Py_ssize_t rows = x.shape[0] * x.shape[1] * x.shape[2]
    cdef Py_ssize_t k = 9 * x.shape[3], co = w.shape[3]
    cdef Py_ssize_t r, j
    cdef real acc
    with nogil:
        _mul_mask(gy, mask)   # gy is a scratch copy
        _im2col(x, cols)
        # grad_w (k, co) = cols(rows, k)^T @ gy(rows, co)
        _gemm_rm_tn(&cols[0, 0], &gy[0, 0, 0, 0], &gw[0, 0, 0, 0],
                    <int> k, <int> co, <int> rows)
        # grad_cols (rows, k) = gy(rows, co) @ w(k, co)^T
        _gemm_rm_nt(&gy[0, 0, 0, 0], &w[0, 0, 0, 0], &gcols[0, 0],
                    <int> rows, <int> k, <int> co)
        _col2im(gcols, gx)
        _mul_mask(gx, mask)
        for j in range(co):
            gb[j] = 0
        for r in range(rows):
            for j in range(co):
                gb[j] = gb[j] + (<real*> &gy[0, 0, 0, 0])[r * co + j]


def conv3x3_forward(x, w, b, mask):
    """Masked 3x3 same-padding convolution. x (B,N,M,Cin) -> (B,N,M,Cout)."""
    x = np.asarray(x)
    if x.dtype not in (np.float64, np.float32):
        from . import pyref
        return pyref.conv3x3_forward(x, w, b, mask)
    dt = x.dtype
    xc = _prep(x, dt)
    wc = _prep(w, dt)
    bc = _prep(b, dt)
    mc = _prep(mask, dt)
    bs, n, m, cin = xc.shape
    co = wc.shape[3]
    cols = _buf("fw_cols", (bs * n * m, 9 * cin), dt)
    out = np.empty((bs, n, m, co), dtype=dt)
    if dt == np.float64:
        _forward_impl[double](xc, wc, bc, mc, cols, out)
    else:
        _forward_impl[float](xc, wc, bc, mc, cols, out)
    return out


def conv3x3_backward(x, w, mask, grad_y):
    """Gradients of the masked convolution: (grad_x, grad_w, grad_b)."""
    x = np.asarray(x)
    if x.dtype not in (np.float64, np.float32):
        from . import pyref
        return pyref.conv3x3_backward(x, w, mask, grad_y)
    dt = x.dtype
    xc = _prep(x, dt)
    wc = _prep(w, dt)
    mc = _prep(mask, dt)
    gy = np.array(grad_y, dtype=dt, order="C", copy=True)
    bs, n, m, cin = xc.shape
    co = wc.shape[3]
    cols = _buf("bw_cols", (bs * n * m, 9 * cin), dt)
    gcols = _buf("bw_gcols", (bs * n * m, 9 * cin), dt)
    gx = np.zeros((bs, n, m, cin), dtype=dt)
    gw = np.empty((3, 3, cin, co), dtype=dt)
    gb = np.empty(co, dtype=dt)
    if dt == np.float64:
        _backward_impl[double](xc, wc, mc, gy, cols, gcols, gx, gw, gb)
    else:
        _backward_impl[float](xc, wc, mc, gy, cols, gcols, gx, gw, gb)
    return gx, gw, gb


cdef void _im2col_1ch(real[:, :, ::1] x, real[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t bs = x.shape[0], n = x.shape[1], m = x.shape[2]
    cdef Py_ssize_t b, i, j, dy, dx, si, sj, r
    for b in range(bs):
        for i in range(n):
            for j in range(m):
                r = (b * n + i) * m + j
                for dy in range(3):
                    si = i + dy - 1
                    for dx in range(3):
                        sj = j + dx - 1
                        if 0 <= si < n and 0 <= sj < m:
                            cols[r, dy * 3 + dx] = x[b, si, sj]
                        else:
                            cols[r, dy * 3 + dx] = 0


cdef _single_impl(real[:, :, ::1] x, real[:, :, ::1] w, real[:, ::1] mask,
                  real[:, ::1] cols, real[:, :, :, ::1] out):
    cdef Py_ssize_t rows = x.shape[0] * x.shape[1] * x.shape[2]
    cdef Py_ssize_t co = w.shape[2]
    with nogil:
        _im2col_1ch(x, cols)
        _gemm_rm(&cols[0, 0], &w[0, 0, 0], &out[0, 0, 0, 0],
                 <int> rows, <int> co, 9, <real> 0.0)
        _mul_mask(out, mask)


def conv3x3_single_channel(x_1ch, w_1ch, mask):
    """Bias-free masked conv of a single input channel. (B,N,M) -> (B,N,M,Cout)."""
    x = np.asarray(x_1ch)
    if x.dtype not in (np.float64, np.float32):
        from . import pyref
        return pyref.conv3x3_single_channel(x, w_1ch, mask)
    dt = x.dtype
    xc = _prep(x, dt)
    wc = _prep(w_1ch, dt)
    mc = _prep(mask, dt)
    bs, n, m = xc.shape
    co = wc.shape[2]
    cols = _buf("sc_cols", (bs * n * m, 9), dt)
    out = np.empty((bs, n, m, co), dtype=dt)
    if dt == np.float64:
        _single_impl[double](xc, wc, mc, cols, out)
    else:
        _single_impl[float](xc, wc, mc, cols, out)
    return out
