# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Convolutions gather patches (im2col) and scatter gradients (col2im) in
compiled loops and leave the matrix products to BLAS. Pooling is direct.

Signatures and results match ``_pykernels`` up to floating-point summation
order.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _im2col(double[:, :, :, ::1] xp, double[:, ::1] cols, Py_ssize_t KH, Py_ssize_t KW,
                  Py_ssize_t HO, Py_ssize_t WO, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t b, c, i, j, y, x, row, colx
    for b in range(B):
        for y in range(HO):
            for x in range(WO):
                row = (b * HO + y) * WO + x
                colx = 0
                for c in range(C):
                    for i in range(KH):
                        for j in range(KW):
                            cols[row, colx] = xp[b, c, y * stride + i, x * stride + j]
                            colx = colx + 1


cdef void _col2im(double[:, ::1] dcols, double[:, :, :, ::1] dxp, Py_ssize_t KH, Py_ssize_t KW,
                  Py_ssize_t HO, Py_ssize_t WO, Py_ssize_t stride) noexcept nogil:
    cdef Py_ssize_t B = dxp.shape[0], C = dxp.shape[1]
    cdef Py_ssize_t b, c, i, j, y, x, row, colx
    for b in range(B):
        for y in range(HO):
            for x in range(WO):
                row = (b * HO + y) * WO + x
                colx = 0
                for c in range(C):
                    for i in range(KH):
                        for j in range(KW):
                            dxp[b, c, y * stride + i, x * stride + j] += dcols[row, colx]
                            colx = colx + 1


def _cols(double[:, :, :, ::1] xp, Py_ssize_t KH, Py_ssize_t KW, int stride):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], H = xp.shape[2], W = xp.shape[3]
    cdef Py_ssize_t HO = (H - KH) // stride + 1, WO = (W - KW) // stride + 1
    cols_arr = np.empty((B * HO * WO, C * KH * KW), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    with nogil:
        _im2col(xp, cols, KH, KW, HO, WO, stride)
    return cols_arr, HO, WO


def conv2d_forward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w, int stride):
    """Patch gather in compiled code, then one matrix product."""
    cdef Py_ssize_t B = xp.shape[0], O = w.shape[0]
    cols, HO, WO = _cols(xp, w.shape[2], w.shape[3], stride)
    wmat = np.asarray(w).reshape(O, -1)
    out = cols @ wmat.T
    return np.ascontiguousarray(out.reshape(B, HO, WO, O).transpose(0, 3, 1, 2))


def conv2d_backward(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] dout, int stride):
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t HO = dout.shape[2], WO = dout.shape[3]
    cols, _, _ = _cols(xp, KH, KW, stride)
    dmat = np.ascontiguousarray(np.asarray(dout).transpose(0, 2, 3, 1)).reshape(-1, O)
    wmat = np.asarray(w).reshape(O, -1)
    dw_arr = (dmat.T @ cols).reshape(O, xp.shape[1], KH, KW)
    dcols_arr = np.ascontiguousarray(dmat @ wmat)
    dxp_arr = np.zeros((xp.shape[0], xp.shape[1], xp.shape[2], xp.shape[3]), dtype=np.float64)
    cdef double[:, ::1] dcols = dcols_arr
    cdef double[:, :, :, ::1] dxp = dxp_arr
    with nogil:
        _col2im(dcols, dxp, KH, KW, HO, WO, stride)
    return dxp_arr, dw_arr


def maxpool_forward(double[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t HO = (H - k) // stride + 1, WO = (W - k) // stride + 1
    out_arr = np.empty((B, C, HO, WO), dtype=np.float64)
    arg_arr = np.empty((B, C, HO, WO), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, y, xo, i, j, r, col, best_idx
    cdef double best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(HO):
                    for xo in range(WO):
                        r = y * stride
                        col = xo * stride
                        best = x[b, c, r, col]
                        best_idx = r * W + col
                        for i in range(k):
                            for j in range(k):
                                v = x[b, c, r + i, col + j]
                                if v > best:
                                    best = v
                                    best_idx = (r + i) * W + col + j
                        out[b, c, y, xo] = best
                        arg[b, c, y, xo] = best_idx
    return out_arr, arg_arr


def maxpool_backward(double[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] argmax, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], HO = dout.shape[2], WO = dout.shape[3]
    dx_arr = np.zeros((B, C, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, y, x, idx
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(HO):
                    for x in range(WO):
                        idx = argmax[b, c, y, x]
                        dx[b, c, idx // w, idx % w] += dout[b, c, y, x]
    return dx_arr
