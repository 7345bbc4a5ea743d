"""Pure-numpy convolution kernels (im2col + BLAS matmul)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w):
    """Valid cross-correlation of x (B,Cin,H,W) with w (Cout,Cin,k,k)."""
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B,Cin,Ho,Wo,k,k)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B,Ho,Wo,Cout)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_grad_input(w, gy, H, W, p):
    """Gradient of conv2d_forward w.r.t. its (unpadded HxW) input.

    The forward pass padded the input by p on each side before the valid
    cross-correlation that produced gy.
    """
    B, Cout, Ho, Wo = gy.shape
    Cin, k = w.shape[1], w.shape[2]
    gxp = np.zeros((B, Cin, H + 2 * p, W + 2 * p))
    for i in range(k):
        for j in range(k):
            tap = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # (B,Ho,Wo,Cin)
            gxp[:, :, i:i + Ho, j:j + Wo] += tap.transpose(0, 3, 1, 2)
    return gxp[:, :, p:p + H, p:p + W] if p else gxp


def conv2d_grad_kernel(x, gy):
    """Gradient of conv2d_forward w.r.t. the kernel.

    x is the (already padded) forward input, gy the output gradient.
    """
    k = x.shape[2] - gy.shape[2] + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    gw = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (Cout,Cin,k,k)
    return np.ascontiguousarray(gw)
