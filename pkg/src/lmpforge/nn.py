"""Differentiable layer operations over NHWC tensors.

Spatial operations take either a single ``H x W x C`` tensor or a batch
``N x H x W x C``; the output keeps the input's batching. Kernels follow the
``kH x kW x C_in x C_out`` layout for :func:`conv2d`, and the same array is used
unchanged by :func:`conv2d_transpose` (mapping ``C_out`` maps back to ``C_in``),
which makes the two exact adjoints of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .tensor import DTYPE, DimensionError, Tensor, as_tensor

Padding = Literal["same", "valid"]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
_SGD_CHUNK = 1 << 17


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    a, b = value
    return int(a), int(b)


def _axis_geometry(size: int, kernel: int, stride: int, padding: Padding, axis: str) -> tuple[int, int, int]:
    """Output length and (before, after) zero padding for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if kernel > size:
            raise DimensionError(f"valid convolution needs kernel {axis} ({kernel}) <= input {axis} ({size})")
        return (size - kernel) // stride + 1, 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


@dataclass(frozen=True)
class _ConvGeometry:
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    pads: tuple[int, int, int, int]  # top, bottom, left, right
    kernel: tuple[int, int]
    stride: tuple[int, int]

    @classmethod
    def for_conv(cls, in_h, in_w, kernel, stride, padding) -> "_ConvGeometry":
        kh, kw = kernel
        sh, sw = stride
        oh, pt, pb = _axis_geometry(in_h, kh, sh, padding, "rows")
        ow, pl, pr = _axis_geometry(in_w, kw, sw, padding, "cols")
        return cls(in_h, in_w, oh, ow, (pt, pb, pl, pr), kernel, stride)

    def padded_shape(self, n: int, c: int) -> tuple[int, int, int, int]:
        pt, pb, pl, pr = self.pads
        return n, self.in_h + pt + pb, self.in_w + pl + pr, c

    def window(self, a: int, b: int) -> tuple[slice, slice, slice, slice]:
        sh, sw = self.stride
        return (
            slice(None),
            slice(a, a + (self.out_h - 1) * sh + 1, sh),
            slice(b, b + (self.out_w - 1) * sw + 1, sw),
            slice(None),
        )

    def crop(self, padded: np.ndarray) -> np.ndarray:
        pt, _, pl, _ = self.pads
        return padded[:, pt : pt + self.in_h, pl : pl + self.in_w, :]


# Stride-1 kernels are applied one tap at a time: each tap is a single GEMM over
# all output positions, so memory stays at O(input) even for 12x18 kernels.


def _conv_apply(x: np.ndarray, k: np.ndarray, geo: _ConvGeometry) -> np.ndarray:
    n, c = x.shape[0], x.shape[3]
    pt, pb, pl, pr = geo.pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kh, kw = geo.kernel
    out = np.zeros((n * geo.out_h * geo.out_w, k.shape[3]), dtype=DTYPE)
    for a in range(kh):
        for b in range(kw):
            patch = np.ascontiguousarray(xp[geo.window(a, b)]).reshape(-1, c)
            out += patch @ k[a, b]
    return out.reshape(n, geo.out_h, geo.out_w, k.shape[3])


def _conv_adjoint(y: np.ndarray, k: np.ndarray, geo: _ConvGeometry) -> np.ndarray:
    n, c = y.shape[0], k.shape[2]
    flat = y.reshape(-1, y.shape[3])
    xp = np.zeros(geo.padded_shape(n, c), dtype=DTYPE)
    kh, kw = geo.kernel
    for a in range(kh):
        for b in range(kw):
            xp[geo.window(a, b)] += (flat @ k[a, b].T).reshape(n, geo.out_h, geo.out_w, c)
    return geo.crop(xp)


def _conv_kernel_grad(x: np.ndarray, y: np.ndarray, geo: _ConvGeometry) -> np.ndarray:
    """d<conv(x, k), y>/dk, i.e. the correlation of the input with the output grad."""
    c = x.shape[3]
    pt, pb, pl, pr = geo.pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    flat = y.reshape(-1, y.shape[3])
    kh, kw = geo.kernel
    grad = np.empty((kh, kw, c, y.shape[3]), dtype=DTYPE)
    for a in range(kh):
        for b in range(kw):
            patch = np.ascontiguousarray(xp[geo.window(a, b)]).reshape(-1, c)
            grad[a, b] = patch.T @ flat
    return grad


def _batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name} expects H x W x C or N x H x W x C input, got shape {x.shape}")


def _check_kernel(kernel: Tensor, name: str) -> None:
    if kernel.ndim != 4:
        raise DimensionError(f"{name} kernel must be kH x kW x C_in x C_out, got shape {kernel.shape}")


def conv2d(input: Tensor, kernel: Tensor, stride=1, padding: Padding = "valid") -> Tensor:
    """2-D cross-correlation, ``out[i, j, f] = sum x[i*s + a, j*s + b, c] * k[a, b, c, f]``.

    ``same`` zero-pads so that the output is ``ceil(input / stride)`` along each
    axis (extra padding goes after); ``valid`` applies no padding.
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    _check_kernel(kernel, "conv2d")
    x, squeeze = _batched(input, "conv2d")
    if x.shape[3] != kernel.shape[2]:
        raise DimensionError(
            f"conv2d channel mismatch: input channels (axis -1) = {x.shape[3]}, kernel C_in (axis 2) = {kernel.shape[2]}"
        )
    geo = _ConvGeometry.for_conv(x.shape[1], x.shape[2], kernel.shape[:2], _pair(stride), padding)
    xd, kd = x.data, kernel.data
    out = Tensor._make(
        _conv_apply(xd, kd, geo),
        (x, kernel),
        lambda g: (_conv_adjoint(g, kd, geo), _conv_kernel_grad(xd, g, geo)),
        "conv2d",
    )
    return out.reshape(out.shape[1:]) if squeeze else out


def conv2d_transpose(input: Tensor, kernel: Tensor, stride=1, padding: Padding = "same") -> Tensor:
    """Transposed convolution: the input-gradient map of :func:`conv2d` run forward.

    ``kernel`` has layout ``kH x kW x C_out x C_in`` (the conv2d layout of the
    convolution being transposed). Output spatial size is ``input * stride`` for
    ``same`` and ``(input - 1) * stride + kernel`` for ``valid``.
    """
    input, kernel = as_tensor(input), as_tensor(kernel)
    _check_kernel(kernel, "conv2d_transpose")
    y, squeeze = _batched(input, "conv2d_transpose")
    if y.shape[3] != kernel.shape[3]:
        raise DimensionError(
            f"conv2d_transpose channel mismatch: input channels (axis -1) = {y.shape[3]}, "
            f"kernel C_in (axis 3) = {kernel.shape[3]}"
        )
    kh, kw = kernel.shape[:2]
    sh, sw = _pair(stride)
    if padding == "same":
        out_h, out_w = y.shape[1] * sh, y.shape[2] * sw
    elif padding == "valid":
        out_h, out_w = (y.shape[1] - 1) * sh + kh, (y.shape[2] - 1) * sw + kw
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    geo = _ConvGeometry.for_conv(out_h, out_w, (kh, kw), (sh, sw), padding)
    yd, kd = y.data, kernel.data
    out = Tensor._make(
        _conv_adjoint(yd, kd, geo),
        (y, kernel),
        lambda g: (_conv_apply(g, kd, geo), _conv_kernel_grad(g, yd, geo)),
        "conv2d_transpose",
    )
    return out.reshape(out.shape[1:]) if squeeze else out


def dense(input: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map with the row-vector convention ``out_j = sum_i in_i * W_ij + b_j``.

    A 1-d input is treated as a single row; any batched input is flattened to
    ``N x D`` first.
    """
    input, weights = as_tensor(input), as_tensor(weights)
    single = input.ndim == 1
    x = input.reshape(1, -1) if single else flatten(input)
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense input length {x.shape[1]} does not match weight input dimension {weights.shape[0] if weights.ndim else '?'}"
        )
    out = x @ weights
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[1],):
            raise DimensionError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
        out = out + bias
    return out.reshape(-1) if single else out


def flatten(input: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return input.reshape(input.shape[0], -1)


def batch_norm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: Literal["train", "infer"] = "train",
    running: dict | None = None,
    *,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel (last axis) batch normalisation.

    In ``train`` mode the batch statistics (biased variance) are used and, when
    ``running`` is given, its ``"mean"``/``"var"`` entries are replaced by their
    exponential moving averages. ``infer`` mode normalises with ``running``.
    """
    input, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    c = input.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm gamma/beta must have length {c} (channel axis), got {gamma.shape}/{beta.shape}")
    x = input.data
    g_, b_ = gamma.data, beta.data
    if mode == "infer":
        if running is None:
            raise ValueError("infer-mode batch_norm needs running statistics")
        inv_std = 1.0 / np.sqrt(running["var"] + eps)
        xhat = (x - running["mean"]) * inv_std
        axes = tuple(range(x.ndim - 1))

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor._make(xhat * g_ + b_, (input, gamma, beta), backward, "batch_norm")
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    axes = tuple(range(x.ndim - 1))
    count = x.size // c
    mean = x.mean(axis=axes)
    centered = x - mean
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if running is not None:
        running["mean"] = momentum * running["mean"] + (1.0 - momentum) * mean
        running["var"] = momentum * running["var"] + (1.0 - momentum) * var

    def backward(g):
        dxhat = g * g_
        sum_d = dxhat.sum(axis=axes)
        sum_dx = (dxhat * xhat).sum(axis=axes)
        dx = (inv_std / count) * (count * dxhat - sum_d - xhat * sum_dx)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(xhat * g_ + b_, (input, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1), got {slope}")
    return as_tensor(x).leaky_relu(slope)


def tanh(x: Tensor) -> Tensor:
    return as_tensor(x).tanh()


def sigmoid(x: Tensor) -> Tensor:
    return as_tensor(x).sigmoid()


def dropout(
    x: Tensor, rate: float, mode: Literal["train", "infer"] = "train", rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout; the identity in ``infer`` mode or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis`` (default: channels), values kept in argument order."""
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != ref[d] for d in range(ndim) if d != axis):
            bad = [d for d in range(min(ndim, t.ndim)) if d != axis and t.shape[d] != ref[d]]
            raise DimensionError(f"concat shape mismatch {ref} vs {t.shape} on axes {bad or 'rank'}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], learning_rate: float) -> None:
    """Plain SGD, ``w <- w - learning_rate * g``: no momentum, no decay.

    Parameters are updated in place, in slices so that no full-size temporary is
    allocated (the large transposed-conv kernels run to tens of megabytes).
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter shape {p.shape}")
    for p, g in zip(params, grads):
        if not p.data.flags.writeable or not p.data.flags.c_contiguous:
            p.data = np.array(p.data, dtype=np.float64)
        w, g = p.data.reshape(-1), np.asarray(g, dtype=np.float64).reshape(-1)
        for lo in range(0, w.size, _SGD_CHUNK):
            w[lo : lo + _SGD_CHUNK] -= learning_rate * g[lo : lo + _SGD_CHUNK]
