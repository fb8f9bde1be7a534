"""Pure numpy im2col / col2im, same contract as the compiled kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad, ho, wo):
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, ho, wo, k, k) -> (B, ho, wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * ho * wo, C * k * k)


def col2im(cols, B, C, H, W, k, stride, pad, ho, wo):
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(B, ho, wo, C, k, k)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += (
                c6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(xp[:, :, pad : pad + H, pad : pad + W])
    return xp
