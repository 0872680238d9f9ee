# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im for same-padded convolution, 2x2 max
pooling and x2 bilinear upsampling (half-pixel centres, edge clamped).

Every function has a numpy twin in ``_kernels_py`` with identical semantics.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k):
    """(N, C, H, W) -> (N, C*k*k, H*W) patch matrix, zero padding k//2."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int pad = k // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C * k * k, H * W), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    cdef Py_ssize_t b, c, u, v, i, j, row, si, j0, j1
    with nogil:
        for b in range(N):
            for c in range(C):
                for u in range(k):
                    for v in range(k):
                        row = (c * k + u) * k + v
                        j0 = pad - v if v < pad else 0
                        j1 = W + pad - v if v > pad else W
                        for i in range(H):
                            si = i + u - pad
                            if si < 0 or si >= H:
                                continue
                            for j in range(j0, j1):
                                o[b, row, i * W + j] = x[b, c, si, j + v - pad]
    return out


def col2im(floating[:, :, ::1] cols, int C, int H, int W, int k):
    """Adjoint of :func:`im2col`: scatter-add patches back into (N, C, H, W)."""
    cdef Py_ssize_t N = cols.shape[0]
    cdef int pad = k // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, u, v, i, j, row, si, j0, j1
    with nogil:
        for b in range(N):
            for c in range(C):
                for u in range(k):
                    for v in range(k):
                        row = (c * k + u) * k + v
                        j0 = pad - v if v < pad else 0
                        j1 = W + pad - v if v > pad else W
                        for i in range(H):
                            si = i + u - pad
                            if si < 0 or si >= H:
                                continue
                            for j in range(j0, j1):
                                o[b, c, si, j + v - pad] += cols[b, row, i * W + j]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3,
    row-major within the window; the first scanned maximum wins ties."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2] // 2, W = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C, H, W), dtype=dtype)
    arg = np.empty((N, C, H, W), dtype=np.int8)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, i, j
    cdef floating best, val
    cdef cnp.int8_t idx
    with nogil:
        for b in range(N):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        best = x[b, c, 2 * i, 2 * j]
                        idx = 0
                        val = x[b, c, 2 * i, 2 * j + 1]
                        if val > best:
                            best = val
                            idx = 1
                        val = x[b, c, 2 * i + 1, 2 * j]
                        if val > best:
                            best = val
                            idx = 2
                        val = x[b, c, 2 * i + 1, 2 * j + 1]
                        if val > best:
                            best = val
                            idx = 3
                        o[b, c, i, j] = best
                        a[b, c, i, j] = idx
    return out, arg


def maxpool2_backward(floating[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] arg):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1], H = dout.shape[2], W = dout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j
    cdef int idx
    with nogil:
        for b in range(N):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        idx = arg[b, c, i, j]
                        o[b, c, 2 * i + (idx >> 1), 2 * j + (idx & 1)] = dout[b, c, i, j]
    return out


cdef inline void _taps(Py_ssize_t o, Py_ssize_t n, Py_ssize_t* lo, Py_ssize_t* hi,
                       double* wlo) noexcept nogil:
    # source coordinate (o + 0.5) / 2 - 0.5, clamped to [0, n - 1]
    cdef Py_ssize_t m = o >> 1
    if o & 1:
        lo[0] = m
        hi[0] = m + 1 if m + 1 < n else n - 1
        wlo[0] = 0.75
    else:
        lo[0] = m - 1 if m > 0 else 0
        hi[0] = m
        wlo[0] = 0.25


def upsample2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, C, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, i0, i1, j0, j1
    cdef double wi, wj, top, bot
    with nogil:
        for b in range(N):
            for c in range(C):
                for i in range(2 * H):
                    _taps(i, H, &i0, &i1, &wi)
                    for j in range(2 * W):
                        _taps(j, W, &j0, &j1, &wj)
                        top = wj * x[b, c, i0, j0] + (1.0 - wj) * x[b, c, i0, j1]
                        bot = wj * x[b, c, i1, j0] + (1.0 - wj) * x[b, c, i1, j1]
                        o[b, c, i, j] = <floating>(wi * top + (1.0 - wi) * bot)
    return out


def upsample2_backward(floating[:, :, :, ::1] dout):
    cdef Py_ssize_t N = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t H = dout.shape[2] // 2, W = dout.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, i0, i1, j0, j1
    cdef double wi, wj, g
    with nogil:
        for b in range(N):
            for c in range(C):
                for i in range(2 * H):
                    _taps(i, H, &i0, &i1, &wi)
                    for j in range(2 * W):
                        _taps(j, W, &j0, &j1, &wj)
                        g = dout[b, c, i, j]
                        o[b, c, i0, j0] += <floating>(wi * wj * g)
                        o[b, c, i0, j1] += <floating>(wi * (1.0 - wj) * g)
                        o[b, c, i1, j0] += <floating>((1.0 - wi) * wj * g)
                        o[b, c, i1, j1] += <floating>((1.0 - wi) * (1.0 - wj) * g)
    return out


# ---------------------------------------------------------------------------
# direct 3x3 convolution (stride 1, zero padding 1)
#
# Inner loops run over one image row through raw pointers so the compiler
# can vectorise them; this beats im2col + GEMM when planes are large and
# channel counts small, which is the shallow end of the network.
# ---------------------------------------------------------------------------

cdef inline void _span(int t, int n, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # valid output range for kernel tap t (0..2) on an axis of length n
    lo[0] = 1 if t == 0 else 0
    hi[0] = n - 1 if t == 2 else n


def conv3x3_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] bias):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((N, O, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, oc, c, u, v, i, j, i0, i1, j0, j1
    cdef floating wv
    cdef floating* orow
    cdef floating* xrow
    cdef floating* op
    cdef floating* xp
    with nogil:
        for b in range(N):
            for oc in range(O):
                op = &o[b, oc, 0, 0]
                for i in range(H * W):
                    op[i] = bias[oc]
                for c in range(C):
                    xp = &x[b, c, 0, 0]
                    for u in range(3):
                        _span(u, H, &i0, &i1)
                        for v in range(3):
                            _span(v, W, &j0, &j1)
                            wv = w[oc, c, u, v]
                            for i in range(i0, i1):
                                orow = op + i * W
                                xrow = xp + (i + u - 1) * W + (v - 1)
                                for j in range(j0, j1):
                                    orow[j] += wv * xrow[j]
    return out


def conv3x3_backward_input(floating[:, :, :, ::1] g, floating[:, :, :, ::1] w):
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef Py_ssize_t C = w.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oc, c, u, v, i, j, i0, i1, j0, j1
    cdef floating wv
    cdef floating* drow
    cdef floating* grow
    cdef floating* dp
    cdef floating* gp
    with nogil:
        for b in range(N):
            for c in range(C):
                dp = &dx[b, c, 0, 0]
                for oc in range(O):
                    gp = &g[b, oc, 0, 0]
                    for u in range(3):
                        _span(u, H, &i0, &i1)
                        for v in range(3):
                            _span(v, W, &j0, &j1)
                            wv = w[oc, c, u, v]
                            for i in range(i0, i1):
                                grow = gp + i * W
                                drow = dp + (i + u - 1) * W + (v - 1)
                                for j in range(j0, j1):
                                    drow[j] += wv * grow[j]
    return out


def conv3x3_backward_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] g):
    """Weight gradient (O, C, 3, 3); bias gradient is left to the caller."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = g.shape[1]
    acc = np.zeros((O, C, 3, 3), dtype=np.float64)
    cdef double[:, :, :, ::1] a = acc
    cdef Py_ssize_t b, oc, c, u, v, i, j, i0, i1, j0, j1
    cdef floating s
    cdef double rowsum
    cdef floating* grow
    cdef floating* xrow
    cdef floating* gp
    cdef floating* xp
    with nogil:
        for b in range(N):
            for oc in range(O):
                gp = &g[b, oc, 0, 0]
                for c in range(C):
                    xp = &x[b, c, 0, 0]
                    for u in range(3):
                        _span(u, H, &i0, &i1)
                        for v in range(3):
                            _span(v, W, &j0, &j1)
                            rowsum = 0.0
                            for i in range(i0, i1):
                                grow = gp + i * W
                                xrow = xp + (i + u - 1) * W + (v - 1)
                                s = 0
                                for j in range(j0, j1):
                                    s += grow[j] * xrow[j]
                                rowsum += s
                            a[oc, c, u, v] += rowsum
    dtype = np.float32 if floating is float else np.float64
    return acc.astype(dtype)
