"""Minimal dense-tensor reverse-mode autodiff.

Covers exactly the operation set the encoding models need: conv2d,
batchnorm, relu/softplus, 3x3 average pooling, the factorized readout,
and elementwise/reduction glue for the objectives. All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import conv2d_forward, conv2d_grad_input, conv2d_grad_kernel

_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (eval inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor):
    """Reverse-mode accumulation of d(loss)/d(leaf) into .grad buffers."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in topo:
        # leaves that don't require grad keep grad=None, letting backward
        # closures skip the corresponding (possibly expensive) computation
        if node._parents or node.requires_grad:
            node.grad = np.zeros_like(node.data)
        else:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch in add: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad += g

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch in sub: {a.data.shape} vs {b.data.shape}")

    def bw(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad -= g

    return _result(a.data - b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        if a.grad is not None:
            a.grad += s * g

    return _result(s * a.data, (a,), bw)


def add_const(a: Tensor, c) -> Tensor:
    def bw(g):
        if a.grad is not None:
            a.grad += g

    return _result(a.data + c, (a,), bw)


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)

    def bw(g):
        if a.grad is not None:
            a.grad += c * g

    return _result(a.data * c, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        if a.grad is not None:
            a.grad += 2.0 * a.data * g

    return _result(a.data * a.data, (a,), bw)


def absval(a: Tensor) -> Tensor:
    def bw(g):
        if a.grad is not None:
            a.grad += np.sign(a.data) * g

    return _result(np.abs(a.data), (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo

    def bw(g):
        if a.grad is not None:
            a.grad += mask * g

    return _result(np.maximum(a.data, lo), (a,), bw)


def log_clamped(a: Tensor, lo: float = 1e-8) -> Tensor:
    """ln(max(a, lo)); gradient is zero where the clamp is active."""
    clamped = np.maximum(a.data, lo)
    mask = a.data > lo

    def bw(g):
        if a.grad is not None:
            a.grad += mask * g / clamped

    return _result(np.log(clamped), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if a.grad is not None:
            a.grad += g.reshape(())

    return _result(np.sum(a.data), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if a.grad is not None:
            a.grad += g.reshape(()) / n

    return _result(np.mean(a.data), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        if a.grad is not None:
            a.grad += g.reshape(a.data.shape)

    return _result(a.data.reshape(shape), (a,), bw)


# ---------------------------------------------------------------------------
# activations

def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "softplus":
        return softplus(a)
    raise ValueError(f"unknown activation {kind!r}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.grad is not None:
            a.grad += mask * g

    return _result(np.maximum(a.data, 0.0), (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # overflow-safe: for large x, ln(1+e^x) = x + ln(1+e^-x) ~= x
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))

    def bw(g):
        if a.grad is not None:
            sig = np.where(x > 30.0, 1.0, 1.0 / (1.0 + np.exp(-np.minimum(x, 30.0))))
            a.grad += sig * g

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, w: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlate x (B,Cin,H,W) with w (Cout,Cin,k,k), stride 1, no bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects (B,Cin,H,W) input and (Cout,Cin,k,k) kernel")
    B, Cin, H, W = x.data.shape
    Cout, Cin_k, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{k2}")
    if Cin != Cin_k:
        raise ValueError(f"channel mismatch: input has {Cin}, kernel expects {Cin_k}")
    if padding == "same":
        p = (k - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    elif padding == "valid":
        p = 0
        if H - k + 1 < 1 or W - k + 1 < 1:
            raise ValueError(f"valid conv output would be empty: input {H}x{W}, kernel {k}")
        xp = x.data
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    y = conv2d_forward(xp, w.data)

    def bw(g):
        g = np.ascontiguousarray(g)
        if w.grad is not None:
            w.grad += conv2d_grad_kernel(xp, g)
        if x.grad is not None:
            x.grad += conv2d_grad_input(w.data, g, H, W, p)

    return _result(y, (x, w), bw)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormParams:
    """Per-channel batchnorm parameters; one instance per (layer, iteration)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batchnorm(x: Tensor, params: BatchNormParams, mode: str = "train") -> Tensor:
    if x.data.ndim != 4:
        raise ValueError("batchnorm expects (B,C,H,W) input")
    B, C = x.data.shape[:2]
    if B < 1:
        raise ValueError("batchnorm on empty batch")
    if C != params.channels:
        raise ValueError(f"channel mismatch: input has {C}, params expect {params.channels}")
    eps = params.epsilon
    gamma, beta = params.gamma, params.beta
    gview = gamma.data.reshape(1, C, 1, 1)
    bview = beta.data.reshape(1, C, 1, 1)

    if mode == "eval":
        inv = 1.0 / np.sqrt(params.running_var + eps)
        xhat = (x.data - params.running_mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
        out = gview * xhat + bview

        def bw_eval(g):
            if x.grad is not None:
                x.grad += g * (gview * inv.reshape(1, C, 1, 1))
            if gamma.grad is not None:
                gamma.grad += np.einsum("bchw,bchw->c", g, xhat)
            if beta.grad is not None:
                beta.grad += g.sum(axis=(0, 2, 3))

        return _result(out, (x, gamma, beta), bw_eval)

    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    n = B * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(1, C, 1, 1)
    var = np.mean(xc * xc, axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, C, 1, 1)
    out = gview * xhat + bview

    m = params.momentum
    params.running_mean[...] = (1.0 - m) * params.running_mean + m * mu
    params.running_var[...] = (1.0 - m) * params.running_var + m * var

    def bw_train(g):
        if gamma.grad is not None:
            gamma.grad += np.einsum("bchw,bchw->c", g, xhat)
        if beta.grad is not None:
            beta.grad += g.sum(axis=(0, 2, 3))
        if x.grad is not None:
            gxhat = g * gview
            s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            s2 = np.einsum("bchw,bchw->c", gxhat, xhat).reshape(1, C, 1, 1)
            x.grad += (inv.reshape(1, C, 1, 1) / n) * (n * gxhat - s1 - xhat * s2)

    return _result(out, (x, gamma, beta), bw_train)


# ---------------------------------------------------------------------------
# pooling and readout

def avgpool3(x: Tensor) -> Tensor:
    """Non-overlapping 3x3 window means; remainder rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ValueError("avgpool3 expects (B,C,H,W) input")
    B, C, H, W = x.data.shape
    if H < 3 or W < 3:
        raise ValueError(f"spatial dims must be >= 3, got {H}x{W}")
    Hp, Wp = H // 3, W // 3
    cropped = x.data[:, :, : Hp * 3, : Wp * 3]
    out = cropped.reshape(B, C, Hp, 3, Wp, 3).mean(axis=(3, 5))

    def bw(g):
        if x.grad is not None:
            spread = np.repeat(np.repeat(g, 3, axis=2), 3, axis=3) / 9.0
            x.grad[:, :, : Hp * 3, : Wp * 3] += spread

    return _result(out, (x,), bw)


def readout(pooled: Tensor, mask: Tensor, featw: Tensor, bias: Tensor) -> Tensor:
    """Factorized per-neuron linear readout: rank-1 spatial x feature weights."""
    B, C, Hp, Wp = pooled.data.shape
    N = mask.data.shape[0]
    if mask.data.shape != (N, Hp, Wp) or featw.data.shape != (N, C) or bias.data.shape != (N,):
        raise ValueError("readout parameter shapes inconsistent with pooled input")
    out = np.einsum("bchw,nhw,nc->bn", pooled.data, mask.data, featw.data, optimize=True)
    out = out + bias.data

    def bw(g):
        if pooled.grad is not None:
            pooled.grad += np.einsum("bn,nhw,nc->bchw", g, mask.data, featw.data, optimize=True)
        if mask.grad is not None:
            mask.grad += np.einsum("bn,bchw,nc->nhw", g, pooled.data, featw.data, optimize=True)
        if featw.grad is not None:
            featw.grad += np.einsum("bn,bchw,nhw->nc", g, pooled.data, mask.data, optimize=True)
        if bias.grad is not None:
            bias.grad += g.sum(axis=0)

    return _result(out, (pooled, mask, featw, bias), bw)


# ---------------------------------------------------------------------------
# gradient verification

def finite_difference_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    err = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        err = max(err, abs(a - fd) / max(1.0, abs(a)))
    return err


def finite_difference_check_params(f, params, step: float = 1e-5, max_coords=None, rng=None) -> float:
    """Like finite_difference_check but for a closure over many leaf tensors.

    f() must rebuild the forward graph from the current parameter values.
    max_coords, when set, checks a random subset of coordinates per tensor.
    """
    for p in params:
        p.requires_grad = True
    out = f()
    backward(out)
    # parameters the graph never touches have no grad buffer; their analytic
    # gradient is zero
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for p in params]
    err = 0.0
    for p, analytic in zip(params, grads):
        flat = p.data.reshape(-1)
        idxs = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = max(err, abs(a - fd) / max(1.0, abs(a)))
    return err
