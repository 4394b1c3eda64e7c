"""Pure-numpy reference kernels for the convolution stack.

Layout is channels-last throughout: images are ``(batch, height, width,
channels)`` and im2col rows are ordered ``(kh, kw, channel)``. The compiled
module ``_kernels`` implements the same functions and must agree with
these bit for bit.
"""

import numpy as np


def im2col(x, k):
    b, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=np.float64)
    xp[:, p:p + h, p:p + w, :] = x
    cols = np.empty((b, h, w, k, k, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, k * k * c)


def col2im(dcols, shape, k):
    b, h, w, c = shape
    p = k // 2
    dcols = dcols.reshape(b, h, w, k, k, c)
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + w, :])


def maxpool_forward(x, ph, pw):
    b, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    win = x[:, :ho * ph, :wo * pw, :].reshape(b, ho, ph, wo, pw, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, ph * pw)
    # argmax returns the first maximum, matching the compiled tie rule
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool_backward(dout, idx, in_shape, ph, pw):
    b, h, w, c = in_shape
    ho, wo = dout.shape[1], dout.shape[2]
    win = np.zeros((b, ho, wo, c, ph * pw), dtype=np.float64)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    win = win.reshape(b, ho, wo, c, ph, pw).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape, dtype=np.float64)
    dx[:, :ho * ph, :wo * pw, :] = win.reshape(b, ho * ph, wo * pw, c)
    return dx


def relu_drop_pool_forward(z, drop, ph, pw):
    a = np.where(z > 0, z, 0.0)
    if drop is not None:
        a = a * drop.reshape(z.shape)
    return maxpool_forward(np.ascontiguousarray(a), ph, pw)


def relu_drop_pool_backward(dout, idx, z, drop, ph, pw):
    da = maxpool_backward(dout, idx, z.shape, ph, pw)
    if drop is not None:
        da = da * drop.reshape(z.shape)
    return np.where(z > 0, da, 0.0)
