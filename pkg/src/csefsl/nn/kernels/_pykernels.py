"""Pure numpy implementations of the convolution and pooling kernels.

Signatures mirror the compiled ``_ckernels`` module exactly. Inputs are
already padded; callers handle padding and bias.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    # (B, C, Ho, Wo, kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(xp, w, stride):
    """Cross-correlation of padded input ``xp`` (B,C,H,W) with ``w`` (O,C,kh,kw)."""
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(xp, kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(xp, w, dout, stride):
    """Return (d padded input, d weights) for ``conv2d_forward``."""
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = dout.shape[2], dout.shape[3]
    win = _windows(xp, kh, kw, stride)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            # (B, O, Ho, Wo) x (O, C) -> (B, C, Ho, Wo)
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    return dxp, np.ascontiguousarray(dw)


def maxpool_forward(x, k, stride):
    """Max over k x k windows; argmax is the flat ``h*W+w`` index of the first maximum."""
    b, c, h, w = x.shape
    win = _windows(x, k, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(b, c, ho, wo, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, argmax, h, w):
    b, c = dout.shape[0], dout.shape[1]
    dx = np.zeros((b * c, h * w))
    idx = argmax.reshape(b * c, -1)
    rows = np.repeat(np.arange(b * c), idx.shape[1])
    np.add.at(dx, (rows, idx.ravel()), dout.reshape(b * c, -1).ravel())
    return dx.reshape(b, c, h, w)
