"""Forward/backward kernels for the layer set. Arrays are batched, NCHW for images."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k, stride):
    # (B, C, H, W) -> (B, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    o, c, k, _ = weight.shape
    cols = _im2col(x, k, stride)
    b, ho, wo, _ = cols.shape
    y = cols.reshape(-1, c * k * k) @ weight.reshape(o, -1).T + bias
    y = y.reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (cols, x.shape)


def conv2d_backward(dy, weight, cache, stride=1, pad=0):
    cols, xshape = cache
    o, c, k, _ = weight.shape
    b, _, ho, wo = dy.shape
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (dy_flat.T @ cols.reshape(-1, c * k * k)).reshape(weight.shape)
    dbias = dy_flat.sum(axis=0)
    dcols = (dy_flat @ weight.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
    dx = np.zeros(xshape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dweight, dbias


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    # relu'(0) = 0
    return dy * mask


def maxpool2d_forward(x, k):
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    xc = x[:, :, : ho * k, : wo * k]
    win = xc.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)  # first maximum wins ties
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2d_backward(dy, k, cache):
    idx, xshape = cache
    b, c, h, w = xshape
    ho, wo = dy.shape[2], dy.shape[3]
    dwin = np.zeros((b, c, ho, wo, k * k), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :, : ho * k, : wo * k] = dwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
    return dx


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, xshape):
    h, w = xshape[2], xshape[3]
    return np.broadcast_to((dy / (h * w))[:, :, None, None], xshape).copy()


def dense_forward(x, weight, bias):
    return x @ weight + bias, x


def dense_backward(dy, weight, x):
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)
