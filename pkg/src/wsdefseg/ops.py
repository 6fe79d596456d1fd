"""Differentiable operations on :class:`~wsdefseg.tensor.Tensor`.

Every op computes its forward result with numpy, checks it is finite and, when a tape is
active and any input requires grad, records a backward rule returning one gradient per
input (``None`` for inputs that take no gradient).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, as_tensor, make_result

LOG_EPS = 1e-7
LN_EPS = 1e-5


# ---------- helpers ----------


def _binary_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither operand is a scalar")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------- elementwise suite ----------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def abs(x: Tensor) -> Tensor:  # noqa: A001
    def backward(g):
        return (g * np.sign(x.data),)

    return make_result(np.abs(x.data), (x,), backward, "abs")


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)

    def backward(g):
        return (g * inside,)

    return make_result(np.clip(x.data, low, high), (x,), backward, "clamp")


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``x`` clamped to [eps, 1 - eps].

    The gradient passes straight through the clamp: a clamped input still receives ``1 / clamped``.
    """
    clipped = np.clip(x.data, eps, 1.0 - eps)

    def backward(g):
        return (g / clipped,)

    return make_result(np.log(clipped), (x,), backward, "log")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function held inside [LOG_EPS, 1 - LOG_EPS]; the derivative is taken at the held value."""
    y = np.clip(0.5 * (1.0 + np.tanh(0.5 * x.data)), LOG_EPS, 1.0 - LOG_EPS)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), backward, "sigmoid")


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is not None:
        axis = _axis(axis, x.ndim, "sum")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    # left-to-right accumulation keeps reductions bit-identical between runs
    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[_axis(axis, x.ndim, "mean")]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------- shape ops ----------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward, "transpose")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); the gradient sums back."""
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from e

    def backward(g):
        return (_unbroadcast(g, x.shape).reshape(x.shape),)

    return make_result(np.array(data), (x,), backward, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    axis = _axis(axis, tensors[0].ndim, "concat")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(data, tensors, backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _axis(axis, x.ndim, "slice_axis")
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{stop}) outside extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return make_result(x.data[index], (x,), backward, "slice_axis")


# ---------- layers ----------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` for x ``[N, in]``, weight ``[in, out]``, bias ``[out]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, inputs, backward, "linear")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """Zero-padded cross-correlation of ``x [N, C, H, W]`` with ``kernel [O, C, kh, kw]``."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not fit kernel {kernel.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not fit {o} output channels")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1 or h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: degenerate output for input {h}x{w}, kernel {kh}x{kw}, pad {pad}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.einsum("nchwij,ocij->nohw", windows, kernel.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        d_kernel = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        d_windows = np.einsum("nohw,ocij->nchwij", g, kernel.data, optimize=True)
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d_windows[..., i, j]
        d_x = d_padded[:, :, pad : pad + h, pad : pad + w]
        grads = [d_x, d_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, inputs, backward, "conv2d")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    if slope.size != 1:
        raise ShapeError(f"prelu: slope must hold one value, got shape {slope.shape}")
    a = float(slope.data.reshape(-1)[0])
    positive = x.data > 0

    def backward(g):
        d_x = np.where(positive, g, a * g)
        d_slope = np.asarray((g * np.where(positive, 0.0, x.data)).sum()).reshape(slope.shape)
        return d_x, d_slope

    return make_result(np.where(positive, x.data, a * x.data), (x, slope), backward, "prelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = LN_EPS) -> Tensor:
    """Normalise along ``axis`` to zero mean and unit variance, then scale and shift."""
    axis = _axis(axis, x.ndim, "layer_norm")
    extent = x.shape[axis]
    if gamma.shape != (extent,) or beta.shape != (extent,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match extent {extent}")
    view = [1] * x.ndim
    view[axis] = extent
    g_view = gamma.data.reshape(view)

    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * g_view + beta.data.reshape(view)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        d_hat = g * g_view
        d_x = inv_std * (
            d_hat
            - d_hat.mean(axis=axis, keepdims=True)
            - x_hat * (d_hat * x_hat).mean(axis=axis, keepdims=True)
        )
        d_gamma = (g * x_hat).sum(axis=others) if others else g * x_hat
        d_beta = g.sum(axis=others) if others else g
        return d_x, d_gamma.reshape(gamma.shape), d_beta.reshape(beta.shape)

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[Rng]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an Rng")
    keep = (rng.random_array(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")


# ---------- sampling ----------


def bilinear_sample(feature: Tensor, points: Tensor) -> Tensor:
    """Sample ``feature [C, H, W]`` at normalized ``points [K, 2]`` given as (x, y).

    Pixel (i, j) has its center at ((j + 0.5) / W, (i + 0.5) / H). Neighbours outside the
    map read as zero. Differentiable in both the map and the point coordinates.
    """
    if feature.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: map {feature.shape} / points {points.shape} have wrong rank")
    c, h, w = feature.shape
    px = points.data[:, 0] * w - 0.5
    py = points.data[:, 1] * h - 0.5
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0
    flat = feature.data.reshape(c, h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        index = np.where(valid, yi * w + xi, 0)
        values = flat[:, index] * valid
        corners.append((index, valid, values))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
    out = weights[0] * v00 + weights[1] * v01 + weights[2] * v10 + weights[3] * v11

    def backward(g):
        d_flat = np.zeros((c, h * w))
        for (index, valid, _), weight in zip(corners, weights):
            contrib = g * (weight * valid)
            for ch in range(c):
                d_flat[ch] += np.bincount(index, weights=contrib[ch], minlength=h * w)
        d_wx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_wy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        d_points = np.stack([w * (g * d_wx).sum(axis=0), h * (g * d_wy).sum(axis=0)], axis=1)
        return d_flat.reshape(c, h, w), d_points

    return make_result(out, (feature, points), backward, "bilinear_sample")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` linear-interpolation matrix, align-corners=false."""
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0 if i0 < n_in - 1 else 0.0
        matrix[i, i0] += 1.0 - lam
        matrix[i, i1] += lam
    return matrix


def interpolate_bilinear(feature: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``feature [C, H, W]`` to ``[C, out_h, out_w]``."""
    if feature.ndim != 3:
        raise ShapeError(f"interpolate_bilinear: expected [C, H, W], got {feature.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"interpolate_bilinear: output size {out_h}x{out_w} must be positive")
    _, h, w = feature.shape
    if (h, w) == (out_h, out_w):
        return feature
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = np.einsum("oh,chw,pw->cop", ry, feature.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),)

    return make_result(out, (feature,), backward, "interpolate_bilinear")
