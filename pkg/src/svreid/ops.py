"""Differentiable primitives used by the backbone and the verification head.

Every op keeps the dtype of its inputs, so the same code runs in float32
for training and float64 for gradient checking. Images are N x C x H x W.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import ContractViolation
from .tensor import Tensor


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward_fn, "mul")


def square(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (2 * x.data * g,)

    return Tensor.from_op(x.data * x.data, (x,), backward_fn, "square")


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def backward_fn(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return Tensor.from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward_fn, "mean")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward_fn(g):
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(shape), (x,), backward_fn, "reshape")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    # tanh form of the logistic never overflows
    s = np.tanh(x.data * 0.5)
    s += 1
    s *= 0.5

    def backward_fn(g):
        t = 1 - s
        t *= x.data
        t += 1
        t *= s
        t *= g
        return (t,)

    return Tensor.from_op(x.data * s, (x,), backward_fn, "swish")


# ---------------------------------------------------------------- convolution


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: Tensor, w: Tensor, stride: int, padding: int, depthwise: bool) -> tuple[int, int]:
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation(f"conv expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"invalid stride={stride} / padding={padding}")
    n, c, h, wd = x.shape
    cw = w.shape[0] if depthwise else w.shape[1]
    if depthwise and w.shape[1] != 1:
        raise ContractViolation(f"depthwise weight must be C x 1 x kh x kw, got {w.shape}")
    if cw != c:
        raise ContractViolation(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    kh, kw = w.shape[2:]
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ContractViolation(
            f"kernel larger than padded input: input {x.shape}, weight {w.shape}, padding {padding}"
        )
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0 or n == 0:
        raise ContractViolation(f"zero-size conv output for input {x.shape}, weight {w.shape}")
    return ho, wo


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N x Cin x H x W) with ``weight`` (Cout x Cin x kh x kw)."""
    ho, wo = _check_conv(x, weight, stride, padding, depthwise=False)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"bias shape {bias.shape} does not match weight {weight.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = weight.shape

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = np.ascontiguousarray(xs[:, :, :ho, :wo]).reshape(n, cin, ho * wo)
        w2 = weight.data.reshape(cout, cin)
        out = np.matmul(w2, xs).reshape(n, cout, ho, wo)

        def pointwise_backward(g):
            g3 = g.reshape(n, cout, ho * wo)
            gw = np.tensordot(g3, xs, axes=([0, 2], [0, 2])).reshape(weight.shape)
            gxs = np.matmul(w2.T, g3).reshape(n, cin, ho, wo)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, : ho * stride : stride, : wo * stride : stride] = gxs
            else:
                gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb

        backward_fn = pointwise_backward
    else:
        xp = _pad(x.data, padding)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # cols: N x Cin x Ho x Wo x kh x kw
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

        def general_backward(g):
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N x Ho x Wo x Cin x kh x kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb

        backward_fn = general_backward

    if bias is not None:
        out = out + bias.data[None, :, None, None]
        return Tensor.from_op(out, (x, weight, bias), backward_fn, "conv2d")
    return Tensor.from_op(out, (x, weight), lambda g: backward_fn(g)[:2], "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is C x 1 x kh x kw."""
    ho, wo = _check_conv(x, weight, stride, padding, depthwise=True)
    xd = np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(weight.data[:, 0]).astype(xd.dtype)
    out = _kernels.depthwise_forward(xd, w, stride, padding, ho, wo)

    def backward_fn(g):
        gx, gw = _kernels.depthwise_backward(xd, w, np.ascontiguousarray(g, dtype=xd.dtype), stride, padding)
        return gx, gw.reshape(weight.shape).astype(weight.dtype)

    return Tensor.from_op(out, (x, weight), backward_fn, "depthwise_conv2d")


# ---------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Per-channel batch normalization over N x H x W.

    In training mode the running statistics are replaced (not mutated in
    place) by ``momentum * old + (1 - momentum) * batch``; the variance fed
    to the running estimate is the unbiased one.
    """
    if x.ndim != 4:
        raise ContractViolation(f"batch_norm expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ContractViolation(f"gamma/beta {gamma.shape}/{beta.shape} do not match {c} channels")
    m = n * h * w
    xd = np.ascontiguousarray(x.data)
    gam = gamma.data.astype(np.float64)

    if training:
        if m < 2:
            raise ContractViolation(f"training-mode batch_norm needs N*H*W >= 2, got input {x.shape}")
        mean, var = _kernels.channel_moments(xd)
        inv_std = 1.0 / np.sqrt(var + eps)
        running_mean.data = (momentum * running_mean.data + (1 - momentum) * mean).astype(running_mean.dtype)
        unbiased = var * (m / (m - 1))
        running_var.data = (momentum * running_var.data + (1 - momentum) * unbiased).astype(running_var.dtype)
        backward_kernel = _kernels.batch_norm_train_backward
    else:
        mean = running_mean.data.astype(np.float64)
        inv_std = 1.0 / np.sqrt(running_var.data.astype(np.float64) + eps)
        backward_kernel = _kernels.batch_norm_eval_backward

    scale = gam * inv_std
    out = _kernels.affine_channels(
        xd, mean.astype(xd.dtype), scale.astype(xd.dtype), beta.data.astype(xd.dtype)
    )

    def backward_fn(g):
        gx, ggamma, gbeta = backward_kernel(xd, np.ascontiguousarray(g, dtype=xd.dtype), mean, inv_std, gam)
        return gx, ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return Tensor.from_op(out, (x, gamma, beta), backward_fn, "batch_norm")


# ---------------------------------------------------------------- pooling / dense


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ContractViolation(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape

    def backward_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), backward_fn, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of N x Din rows by a Dout x Din weight.

    The forward pass reduces each output over a contiguous axis, so a row's
    result never depends on how many other rows are in the batch.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = (x.data[:, None, :] * weight.data[None, :, :]).sum(axis=-1)
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward_fn, "linear")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0 <= p < 1:
        raise ContractViolation(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractViolation("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)

    def backward_fn(g):
        return (g * mask,)

    return Tensor.from_op(x.data * mask, (x,), backward_fn, "dropout")


# ---------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of N x 2 logits against class indices.

    Returns the scalar loss and the N x 2 probabilities. Class 0 is "same",
    class 1 is "different".
    """
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ContractViolation(f"expected N x 2 logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ContractViolation(f"targets shape {targets.shape} does not match {n} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    probs = np.exp(z - lse[:, None])
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, targets]).mean(), dtype=logits.dtype)

    def backward_fn(g):
        grad = probs.copy()
        grad[rows, targets] -= 1
        return (grad * (g / n),)

    return Tensor.from_op(loss, (logits,), backward_fn, "softmax_cross_entropy"), probs
