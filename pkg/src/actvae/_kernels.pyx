# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM kernels (float32 / float64).

Same contract as ``actvae._kernels_py``: gate layout (i, f, g, o), inputs
``xh = [x, h_prev]``.  Matrix products go through scipy's BLAS bindings.
Transcendentals use one in-place ``numpy.tanh`` per buffer (SIMD) with
``sigmoid(x) = (1 + tanh(x / 2)) / 2``; everything else (bias, gate
combination, cell update, elementwise backward) is fused into plain loops
that run without the GIL.
"""
import numpy as np
from scipy.linalg.cython_blas cimport sgemm, dgemm

ctypedef fused floating:
    float
    double


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, floating alpha,
                       floating *a, int lda, floating *b, int ldb, floating beta,
                       floating *c, int ldc) noexcept nogil:
    if floating is float:
        sgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def lstm_forward(const floating[:, ::1] W, const floating[::1] b, const floating[:, ::1] xh,
                 const floating[:, ::1] c_prev):
    cdef int B = xh.shape[0]
    cdef int K = xh.shape[1]
    cdef int H = c_prev.shape[1]
    cdef int G = 4 * H
    if W.shape[0] != G or W.shape[1] != K or b.shape[0] != G or c_prev.shape[0] != B:
        raise ValueError("lstm_forward: inconsistent shapes")
    dtype = np.float32 if floating is float else np.float64
    act_arr = np.empty((B, G), dtype=dtype)
    c_arr = np.empty((B, H), dtype=dtype)
    cdef floating[:, ::1] act = act_arr
    cdef floating[:, ::1] c = c_arr
    cdef Py_ssize_t r, j
    cdef floating *a
    cdef const floating *cp
    cdef floating *cr
    with nogil:
        if B > 0:
            # act(B x G) = xh(B x K) @ W^T, computed column-major as W^T' @ xh'
            _gemm(b"T", b"N", G, B, K, <floating>1.0, <floating *>&W[0, 0], K,
                  <floating *>&xh[0, 0], K, <floating>0.0, &act[0, 0], G)
        for r in range(B):
            a = &act[r, 0]
            for j in range(2 * H):
                a[j] = 0.5 * (a[j] + b[j])
            for j in range(2 * H, 3 * H):
                a[j] = a[j] + b[j]
            for j in range(3 * H, G):
                a[j] = 0.5 * (a[j] + b[j])
    np.tanh(act_arr, out=act_arr)
    with nogil:
        for r in range(B):
            a = &act[r, 0]
            cp = &c_prev[r, 0]
            cr = &c[r, 0]
            for j in range(2 * H):
                a[j] = 0.5 + 0.5 * a[j]
            for j in range(3 * H, G):
                a[j] = 0.5 + 0.5 * a[j]
            for j in range(H):
                cr[j] = a[H + j] * cp[j] + a[j] * a[2 * H + j]
    h_arr = np.tanh(c_arr)
    cdef floating[:, ::1] h = h_arr
    with nogil:
        for r in range(B):
            a = &act[r, 0]
            cr = &h[r, 0]
            for j in range(H):
                cr[j] = a[3 * H + j] * cr[j]
    return h_arr, c_arr, act_arr


def lstm_backward(const floating[:, ::1] W, const floating[:, ::1] xh,
                  const floating[:, ::1] c_prev, const floating[:, ::1] c,
                  const floating[:, ::1] act, const floating[:, ::1] dh,
                  const floating[:, ::1] dc, floating[:, ::1] dW, floating[::1] db):
    cdef int B = xh.shape[0]
    cdef int K = xh.shape[1]
    cdef int H = c_prev.shape[1]
    cdef int G = 4 * H
    if (W.shape[0] != G or W.shape[1] != K or dW.shape[0] != G or dW.shape[1] != K
            or db.shape[0] != G or act.shape[1] != G or c.shape[1] != H):
        raise ValueError("lstm_backward: inconsistent shapes")
    dtype = np.float32 if floating is float else np.float64
    da_arr = np.empty((B, G), dtype=dtype)
    dcp_arr = np.empty((B, H), dtype=dtype)
    dxh_arr = np.empty((B, K), dtype=dtype)
    tc_arr = np.tanh(c)
    cdef floating[:, ::1] tcv = tc_arr
    cdef floating[:, ::1] da = da_arr
    cdef floating[:, ::1] dcp = dcp_arr
    cdef floating[:, ::1] dxh = dxh_arr
    cdef Py_ssize_t r, j
    cdef const floating *a
    cdef floating *d
    cdef const floating *cp
    cdef floating *tr
    cdef const floating *dhr
    cdef const floating *dcr
    cdef floating *dcpr
    cdef floating tc, dct
    with nogil:
        for r in range(B):
            a = &act[r, 0]
            d = &da[r, 0]
            cp = &c_prev[r, 0]
            tr = &tcv[r, 0]
            dhr = &dh[r, 0]
            dcr = &dc[r, 0]
            dcpr = &dcp[r, 0]
            for j in range(H):
                tc = tr[j]
                dct = dcr[j] + dhr[j] * a[3 * H + j] * (1.0 - tc * tc)
                d[j] = dct * a[2 * H + j] * a[j] * (1.0 - a[j])
                d[H + j] = dct * cp[j] * a[H + j] * (1.0 - a[H + j])
                d[2 * H + j] = dct * a[j] * (1.0 - a[2 * H + j] * a[2 * H + j])
                d[3 * H + j] = dhr[j] * tc * a[3 * H + j] * (1.0 - a[3 * H + j])
                dcpr[j] = dct * a[H + j]
        for r in range(B):
            d = &da[r, 0]
            for j in range(G):
                db[j] += d[j]
        if B > 0:
            # dW(G x K) += da^T @ xh  ->  column-major: dW' (K x G) += xh' @ da
            _gemm(b"N", b"T", K, G, B, <floating>1.0, <floating *>&xh[0, 0], K, &da[0, 0], G,
                  <floating>1.0, &dW[0, 0], K)
            # dxh(B x K) = da @ W  ->  column-major: dxh' (K x B) = W' @ da'
            _gemm(b"N", b"N", K, B, G, <floating>1.0, <floating *>&W[0, 0], K, &da[0, 0], G,
                  <floating>0.0, &dxh[0, 0], K)
    return dxh_arr, dcp_arr
