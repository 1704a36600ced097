"""Layer primitives for residual classifiers: convolution, batch norm,
pooling, dense, softmax.

Every op is a fused forward/backward pair registered on the autodiff graph.
Convolution uses the cross-correlation convention (no kernel flip) with
symmetric zero padding. Ops are dtype-generic so the 64-bit grad-check
shadow path reuses the same code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, relu  # noqa: F401  (relu re-exported as a layer op)
from .errors import DegenerateBatch, InvalidGeometry, ShapeMismatch


@dataclass
class Conv2dParams:
    weight: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1  # new = (1 - m) * old + m * batch
    training_mode: bool = False


def _out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _window_view(xp, k_h, k_w, stride, oh, ow):
    """Gather sliding windows into [b, c, kh, kw, oh, ow] (copies)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k_h, k_w, oh, ow), dtype=xp.dtype)
    for ki in range(k_h):
        for kj in range(k_w):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
    return cols


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Direct 2-d convolution, differentiable w.r.t. input, weight and bias."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [b,c,h,w], got {x.shape}")
    oc, ic, kh, kw = p.weight.shape
    b, c, h, w = x.shape
    if c != ic:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {ic}")
    stride, pad = p.stride, p.padding
    if stride < 1 or pad < 0 or kh < 1 or kw < 1:
        raise InvalidGeometry(f"conv2d: bad geometry k=({kh},{kw}) stride={stride} pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise InvalidGeometry(f"conv2d: kernel ({kh},{kw}) exceeds padded input ({h + 2 * pad},{w + 2 * pad})")

    oh, ow = _out_dim(h, kh, stride, pad), _out_dim(w, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _window_view(xp, kh, kw, stride, oh, ow)
    cols2 = cols.reshape(b, ic * kh * kw, oh * ow)
    wmat = p.weight.data.reshape(oc, ic * kh * kw)
    out = np.matmul(wmat, cols2).reshape(b, oc, oh, ow)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, oc, 1, 1)

    weight, bias = p.weight, p.bias

    def backward_fn(g):
        gmat = g.reshape(b, oc, oh * ow)
        if weight.requires_grad:
            dw = np.einsum("bol,bkl->ok", gmat, cols2).reshape(weight.shape)
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat).reshape(b, ic, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += dcols[:, :, ki, kj]
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward_fn, "conv2d")


def batchnorm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel batch normalization: y = gamma * x_hat + beta.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running stats in place; inference mode uses the running
    stats. Running-stat updates are a forward side effect and never enter
    the gradient.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"batchnorm expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    if c != p.gamma.size:
        raise ShapeMismatch(f"batchnorm: {c} channels vs {p.gamma.size} gammas")
    gamma, beta = p.gamma, p.beta
    gview = gamma.data.reshape(1, c, 1, 1)

    if p.training_mode:
        if b < 2:
            raise DegenerateBatch(f"training-mode batchnorm needs batch >= 2, got {b}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = p.running_mean.data.dtype.type(p.momentum)
        p.running_mean.data[...] = (1 - m) * p.running_mean.data + m * mean.astype(p.running_mean.data.dtype)
        p.running_var.data[...] = (1 - m) * p.running_var.data + m * var.astype(p.running_var.data.dtype)
        ivar = 1.0 / np.sqrt(var + x.data.dtype.type(p.eps))
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gview * xhat + beta.data.reshape(1, c, 1, 1)
        n = b * h * w

        def backward_fn(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxhat = g * gview
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (ivar.reshape(1, c, 1, 1) / n) * (n * dxhat - s1 - xhat * s2)
                x._accumulate(dx)

    else:
        ivar = 1.0 / np.sqrt(p.running_var.data + x.data.dtype.type(p.eps))
        xhat = (x.data - p.running_mean.data.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gview * xhat + beta.data.reshape(1, c, 1, 1)

        def backward_fn(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(g * gview * ivar.reshape(1, c, 1, 1))

    return Tensor._from_op(out, (x, gamma, beta), backward_fn, "batchnorm")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window max; the gradient routes to the argmax, ties to the lowest
    flat (row-major) index inside the window."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    if k < 1 or stride < 1 or k > h or k > w:
        raise InvalidGeometry(f"maxpool2d: window {k} stride {stride} on input ({h},{w})")
    oh, ow = _out_dim(h, k, stride, 0), _out_dim(w, k, stride, 0)
    cols = _window_view(x.data, k, k, stride, oh, ow).reshape(b, c, k * k, oh, ow)
    idx = np.argmax(cols, axis=2)  # first max wins on ties
    out = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]

    def backward_fn(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        for m in range(k * k):
            contrib = g * (idx == m)
            ki, kj = divmod(m, k)
            dx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += contrib
        x._accumulate(dx)

    return Tensor._from_op(out, (x,), backward_fn, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Average each channel plane: [b,c,h,w] -> [b,c]."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avgpool expects [b,c,h,w], got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.data.dtype))

    return Tensor._from_op(out, (x,), backward_fn, "global_avgpool")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ W + bias on [b,d] inputs."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeMismatch(f"dense expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.size:
        raise ShapeMismatch(f"dense dims disagree: x {x.shape}, W {weight.shape}, b {bias.shape}")
    out = x.data @ weight.data + bias.data.reshape(1, -1)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return Tensor._from_op(out, (x, weight, bias), backward_fn, "dense")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-6."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax expects [b,n], got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        if logits.requires_grad:
            inner = (g * s).sum(axis=1, keepdims=True)
            logits._accumulate(s * (g - inner))

    return Tensor._from_op(s, (logits,), backward_fn, "softmax")
