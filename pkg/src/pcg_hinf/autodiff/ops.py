"""Differentiable operations: exactly what the CNN / recurrent model needs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_node


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype))


def _binary_operands(a, b):
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    return a, b


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return make_node(a.data * b.data, (a, b), back, "mul")


def one_minus(x: Tensor) -> Tensor:
    return make_node(1.0 - x.data, (x,), lambda g: (-g,), "one_minus")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError(
            f"log of non-positive value (min {x.data.min():.3g}) in 'log'")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


_POINTWISE = {
    "sigmoid": sigmoid, "tanh": tanh, "log": log, "relu": relu,
    "one_minus": one_minus, "mul": mul, "add": add, "sub": sub,
}


def pointwise(fn: str, x, y=None) -> Tensor:
    """Dispatch by name, e.g. ``pointwise("sigmoid", x)`` or ``pointwise("mul", x, y)``."""
    try:
        op = _POINTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown pointwise op {fn!r}; expected one of {sorted(_POINTWISE)}")
    return op(x) if y is None else op(x, y)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                     lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,),
                     lambda g: (np.transpose(g, inverse),), "transpose")


def index(x: Tensor, key) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)
    return make_node(np.array(x.data[key]), (x,), back, "index")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return make_node(a.data @ b.data, (a, b),
                     lambda g: (g @ b.data.T if a.requires_grad else None,
                                a.data.T @ g if b.requires_grad else None), "matmul")


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` for x of shape (B, in) and W of shape (in, out)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"dense bias shape {b.shape} does not match weight {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        grads = [g @ W.data.T if x.requires_grad else None,
                 x.data.T @ g if W.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads
    return make_node(out, parents, back, "dense")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, 9*C) zero-padded patches, column order (ki, kj, c)."""
    B, C, H, W = x.shape
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, H, W, 9, C), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, 3 * ki + kj, :] = xp[:, ki:ki + H, kj:kj + W, :]
    return cols.reshape(B * H * W, 9 * C)


def _kernel_matrix(k: np.ndarray) -> np.ndarray:
    # (C_out, C_in, 3, 3) -> (9*C_in, C_out) matching _im2col column order
    return k.transpose(2, 3, 1, 0).reshape(-1, k.shape[0])


def _conv_raw(x: np.ndarray, k: np.ndarray):
    B, _, H, W = x.shape
    cols = _im2col(x)
    out = cols @ _kernel_matrix(k)
    return out, cols


def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d_same expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    C_out, C_in, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d_same supports 3x3 kernels only, got {kh}x{kw}")
    if C_in != C:
        raise ValueError(f"conv2d_same channel mismatch: input has {C}, kernels expect {C_in}")
    if bias.shape != (C_out,):
        raise ValueError(f"conv bias shape {bias.shape} does not match {C_out} output channels")

    flat, cols = _conv_raw(x.data, kernels.data)
    flat += bias.data
    out = np.ascontiguousarray(flat.reshape(B, H, W, C_out).transpose(0, 3, 1, 2))

    def back(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * H * W, C_out)
        gk = gb = gx = None
        if kernels.requires_grad:
            gk = (cols.T @ gf).reshape(3, 3, C, C_out).transpose(3, 2, 0, 1)
        if bias.requires_grad:
            gb = gf.sum(axis=0)
        if x.requires_grad:
            # input gradient of a same-padded 3x3 correlation is the same
            # correlation with the kernel rotated 180 degrees and channels swapped
            rot = kernels.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gflat, _ = _conv_raw(g, rot)
            gx = np.ascontiguousarray(gflat.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        return gx, gk, gb
    return make_node(out, (x, kernels, bias), back, "conv2d_same")


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    updates: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train") -> Tensor:
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    eps = state.eps
    g4 = gamma.data.reshape(1, C, 1, 1)

    if mode == "eval":
        if state.updates == 0:
            raise RuntimeError("batchnorm running statistics are uninitialised; train first")
        inv_std = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps)
        xhat = (x.data - state.running_mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, C, 1, 1)

        def back_eval(g):
            return (g * (g4 * inv_std.reshape(1, C, 1, 1)) if x.requires_grad else None,
                    (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                    g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)
        return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval, "batchnorm2d")

    if mode != "train":
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    m = B * H * W
    if m < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = g4 * xhat + beta.data.reshape(1, C, 1, 1)

    mom = state.momentum
    state.running_mean = ((1 - mom) * state.running_mean + mom * mu.reshape(C)).astype(state.running_mean.dtype)
    unbiased = var.reshape(C) * m / (m - 1)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    state.updates += 1

    def back(g):
        gx = None
        if x.requires_grad:
            gxhat = g * g4
            gx = (inv_std / m) * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                                  - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return (gx,
                (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)
    return make_node(out, (x, gamma, beta), back, "batchnorm2d")


def maxpool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max; ties route the gradient to the first cell in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool_2x2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)
    return make_node(out, (x,), back, "maxpool_2x2")
