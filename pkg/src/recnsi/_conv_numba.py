"""Numba-jitted convolution kernels (jitted im2col feeding a BLAS matmul)."""

import numpy as np
from numba import njit


@njit(cache=True)
def _im2col(x, k):
    # col[(c*k+i)*k+j, (b*Ho+p)*Wo+q] = x[b, c, p+i, q+j]
    B, Cin, H, W = x.shape
    Ho = H - k + 1
    Wo = W - k + 1
    col = np.empty((Cin * k * k, B * Ho * Wo))
    for c in range(Cin):
        for i in range(k):
            for j in range(k):
                t = (c * k + i) * k + j
                for b in range(B):
                    for p in range(Ho):
                        base = (b * Ho + p) * Wo
                        col[t, base:base + Wo] = x[b, c, p + i, j:j + Wo]
    return col


@njit(cache=True)
def conv2d_forward(x, w):
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    k = w.shape[2]
    Ho = H - k + 1
    Wo = W - k + 1
    col = _im2col(x, k)
    w2 = np.ascontiguousarray(w.reshape(Cout, Cin * k * k))
    y2 = np.dot(w2, col)  # (Cout, B*Ho*Wo)
    y = np.empty((B, Cout, Ho, Wo))
    for b in range(B):
        for o in range(Cout):
            for p in range(Ho):
                base = (b * Ho + p) * Wo
                y[b, o, p, :] = y2[o, base:base + Wo]
    return y


@njit(cache=True)
def conv2d_grad_input(w, gy, H, W, p):
    # adjoint of the padded valid cross-correlation: BLAS matmul into column
    # space, then scatter-add back onto the unpadded input grid
    B, Cout, Ho, Wo = gy.shape
    Cin = w.shape[1]
    k = w.shape[2]
    wt = np.ascontiguousarray(w.reshape(Cout, Cin * k * k).T)
    gy2 = np.empty((Cout, B * Ho * Wo))
    for b in range(B):
        for o in range(Cout):
            for q in range(Ho):
                base = (b * Ho + q) * Wo
                gy2[o, base:base + Wo] = gy[b, o, q, :]
    col = np.dot(wt, gy2)  # (Cin*k*k, B*Ho*Wo)
    gx = np.zeros((B, Cin, H, W))
    for c in range(Cin):
        for i in range(k):
            for j in range(k):
                t = (c * k + i) * k + j
                x0 = j - p
                lo = max(0, -x0)
                hi = min(Wo, W - x0)
                if lo >= hi:
                    continue
                for b in range(B):
                    for q in range(Ho):
                        y = q + i - p
                        if y < 0 or y >= H:
                            continue
                        base = (b * Ho + q) * Wo
                        gx[b, c, y, x0 + lo:x0 + hi] += col[t, base + lo:base + hi]
    return gx


@njit(cache=True)
def conv2d_grad_kernel(x, gy):
    B, Cin, H, W = x.shape
    Cout = gy.shape[1]
    Ho = gy.shape[2]
    Wo = gy.shape[3]
    k = H - Ho + 1
    col = _im2col(x, k)
    gy2 = np.empty((B * Ho * Wo, Cout))
    for b in range(B):
        for o in range(Cout):
            for p in range(Ho):
                base = (b * Ho + p) * Wo
                gy2[base:base + Wo, o] = gy[b, o, p, :]
    gw2 = np.dot(col, gy2)  # (Cin*k*k, Cout)
    return np.ascontiguousarray(gw2.T).reshape(Cout, Cin, k, k)
