"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same results (up to float rounding order).
"""
import numpy as np


def im2col(x, k):
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + h, v:v + w]
    return cols.reshape(n, c * k * k, h * w)


def col2im(cols, c, h, w, k):
    n = cols.shape[0]
    pad = k // 2
    cols = cols.reshape(n, c, k, k, h, w)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            xp[:, :, u:u + h, v:v + w] += cols[:, :, u, v]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def maxpool2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first occurrence, which is the tie rule we want
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dout, arg):
    n, c, h, w = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    win = np.where(onehot, dout[..., None], 0).astype(dout.dtype)
    win = win.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * h, 2 * w))


def _axis_taps(n):
    o = np.arange(2 * n)
    m = o >> 1
    odd = (o & 1).astype(bool)
    lo = np.where(odd, m, np.maximum(m - 1, 0))
    hi = np.where(odd, np.minimum(m + 1, n - 1), m)
    wlo = np.where(odd, 0.75, 0.25)
    return lo, hi, wlo


def upsample2_forward(x):
    n, c, h, w = x.shape
    i0, i1, wi = _axis_taps(h)
    j0, j1, wj = _axis_taps(w)
    wi = wi.astype(x.dtype)[:, None]
    wj = wj.astype(x.dtype)
    rows = wi * x[:, :, i0, :] + (1 - wi) * x[:, :, i1, :]
    out = wj * rows[:, :, :, j0] + (1 - wj) * rows[:, :, :, j1]
    return np.ascontiguousarray(out)


def upsample2_backward(dout):
    n, c, h2, w2 = dout.shape
    h, w = h2 // 2, w2 // 2
    i0, i1, wi = _axis_taps(h)
    j0, j1, wj = _axis_taps(w)
    wj = wj.astype(dout.dtype)
    rows = np.zeros((n, c, h2, w), dtype=dout.dtype)
    np.add.at(rows, (slice(None), slice(None), slice(None), j0), wj * dout)
    np.add.at(rows, (slice(None), slice(None), slice(None), j1), (1 - wj) * dout)
    wi = wi.astype(dout.dtype)[:, None]
    out = np.zeros((n, c, h, w), dtype=dout.dtype)
    np.add.at(out, (slice(None), slice(None), i0), wi * rows)
    np.add.at(out, (slice(None), slice(None), i1), (1 - wi) * rows)
    return out


def conv3x3_forward(x, w, bias):
    n, c, h, wd = x.shape
    cols = im2col(x, 3)
    out = np.matmul(w.reshape(w.shape[0], -1), cols) + bias[:, None]
    return out.reshape(n, w.shape[0], h, wd)


def conv3x3_backward_input(g, w):
    n, o, h, wd = g.shape
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, h * wd))
    return col2im(dcols, w.shape[1], h, wd, 3)


def conv3x3_backward_weight(x, g):
    n, o, h, wd = g.shape
    cols = im2col(x, 3)
    dw = np.matmul(g.reshape(n, o, h * wd), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(o, x.shape[1], 3, 3)
