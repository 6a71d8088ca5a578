"""Pure numpy kernels, used when the compiled extension is unavailable.

Same calling convention as the compiled module: batched C-contiguous inputs,
caller-allocated zeroed outputs that are accumulated into.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_full(x, filters, out):
    h, w = x.shape[2:]
    H, W = filters.shape[2:]
    for p in range(H):
        for q in range(W):
            out[:, :, p:p + h, q:q + w] += np.einsum(
                "rc,nchw->nrhw", filters[:, :, p, q], x)


def corr_valid(y, filters, out):
    H, W = filters.shape[2:]
    windows = sliding_window_view(y, (H, W), axis=(2, 3))
    out += np.moveaxis(
        np.tensordot(windows, filters, axes=([1, 4, 5], [0, 2, 3])), 3, 1)


def filter_grad(residual, code, out):
    h, w = code.shape[2:]
    H, W = out.shape[2:]
    code = code.astype(np.float64, copy=False)
    residual = residual.astype(np.float64, copy=False)
    for p in range(H):
        for q in range(W):
            out[:, :, p, q] += np.einsum(
                "nrhw,nchw->rc", residual[:, :, p:p + h, q:q + w], code)
