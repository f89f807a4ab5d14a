"""Differentiable numeric kernel: layers, resize, optimiser and gradient checks.

Feature grids are plain ``float64`` arrays of shape ``(height, width,
channels)``. Every forward function has a matching ``*_backward`` that takes
the upstream gradient plus whatever the forward cached, so the fixed VGN
graph can be differentiated by hand without an autodiff tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from vgn._backend import kernels


class DimensionError(ValueError):
    """Raised when array shapes are incompatible."""


@dataclass
class ParamTensor:
    """A trainable array with its gradient and momentum buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    @classmethod
    def init_uniform(cls, name, shape, fan_in, rng, gain=math.sqrt(6.0)):
        """Weights ~ U(-b, b) with ``b = gain / sqrt(fan_in)``."""
        bound = gain / math.sqrt(max(fan_in, 1))
        return cls(name, rng.uniform(-bound, bound, size=shape))

    @classmethod
    def zeros(cls, name, shape):
        return cls(name, np.zeros(shape))


def as_grid(x):
    """View a 2-D map as a one-channel grid; 3-D arrays pass through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None]
    if x.ndim != 3:
        raise DimensionError(f"expected (H, W[, C]) array, got shape {x.shape}")
    return x


# -- convolution ------------------------------------------------------------

def conv2d_forward(x, kernel, bias, stride=1, pad=None):
    """Cross-correlate ``x`` (H, W, Cin) with ``kernel`` (k, k, Cin, Cout).

    ``pad`` defaults to ``k // 2``, which keeps the spatial size at stride 1.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"bad conv shapes: input {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kernel.shape[:2]}")
    if kernel.shape[2] != x.shape[2]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[2]}")
    if bias.shape != (kernel.shape[3],):
        raise DimensionError(f"bias shape {bias.shape} != ({kernel.shape[3]},)")
    if pad is None:
        pad = k // 2
    if stride < 1 or x.shape[0] + 2 * pad < k or x.shape[1] + 2 * pad < k:
        raise DimensionError("input too small for kernel/stride")
    return np.asarray(kernels.conv2d_forward(x, kernel, bias, int(stride), int(pad)))


def conv2d_backward(upstream, x, kernel, stride=1, pad=None):
    """Gradients of :func:`conv2d_forward`: ``(input_grad, kernel_grad, bias_grad)``."""
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    k = kernel.shape[0]
    if pad is None:
        pad = k // 2
    ho = (x.shape[0] + 2 * pad - k) // stride + 1
    wo = (x.shape[1] + 2 * pad - k) // stride + 1
    if upstream.shape != (ho, wo, kernel.shape[3]) or kernel.shape[2] != x.shape[2]:
        raise DimensionError(
            f"upstream {upstream.shape} inconsistent with input {x.shape} "
            f"and kernel {kernel.shape}")
    dx, dw, db = kernels.conv2d_backward(upstream, x, kernel, int(stride), int(pad))
    return np.asarray(dx), np.asarray(dw), np.asarray(db)


# -- dense ------------------------------------------------------------------

def dense_forward(x, weight):
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {weight.shape}")
    return x @ weight


def dense_backward(upstream, x, weight):
    """Returns ``(input_grad, weight_grad)``."""
    return upstream @ weight.T, x.T @ upstream


# -- activations ------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(upstream, out):
    return upstream * (out > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(upstream, out):
    return upstream * out * (1.0 - out)


_ACTIVATIONS = {"relu": (relu, relu_backward), "sigmoid": (sigmoid, sigmoid_backward)}


def activate(x, kind):
    return _ACTIVATIONS[kind][0](x)


def activate_backward(upstream, out, kind):
    """Backward of :func:`activate`, from the cached forward output."""
    return _ACTIVATIONS[kind][1](upstream, out)


# -- resampling -------------------------------------------------------------

def _corner_aligned(n_in, n_out):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize with corner-aligned sampling.

    Uses the ``a + f * (b - a)`` form so constant inputs stay exactly constant.
    """
    x = as_grid(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be positive")
    y0, y1, fy = _corner_aligned(x.shape[0], out_h)
    x0, x1, fx = _corner_aligned(x.shape[1], out_w)
    rows = x[y0] + fy[:, None, None] * (x[y1] - x[y0])
    return rows[:, x0] + fx[None, :, None] * (rows[:, x1] - rows[:, x0])


def resize_bilinear_backward(upstream, in_h, in_w):
    out_h, out_w, c = upstream.shape
    y0, y1, fy = _corner_aligned(in_h, out_h)
    x0, x1, fx = _corner_aligned(in_w, out_w)
    drows = np.zeros((out_h, in_w, c))
    np.add.at(drows, (slice(None), x0), upstream * (1.0 - fx)[None, :, None])
    np.add.at(drows, (slice(None), x1), upstream * fx[None, :, None])
    dx = np.zeros((in_h, in_w, c))
    np.add.at(dx, y0, drows * (1.0 - fy)[:, None, None])
    np.add.at(dx, y1, drows * fy[:, None, None])
    return dx


def maxpool2x2(x):
    """2x2 max pooling (odd trailing rows/columns are dropped).

    Returns the pooled grid and the argmax index (0..3) of each window,
    first maximum winning ties.
    """
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = x[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3)
    win = win.reshape(h2, w2, c, 4)
    arg = win.argmax(axis=3)
    return np.take_along_axis(win, arg[..., None], axis=3)[..., 0], arg


def maxpool2x2_backward(upstream, arg, in_shape):
    h, w, c = in_shape
    h2, w2 = upstream.shape[:2]
    win = np.zeros((h2, w2, c, 4))
    np.put_along_axis(win, arg[..., None], upstream[..., None], axis=3)
    dx = np.zeros(in_shape)
    dx[:2 * h2, :2 * w2] = (win.reshape(h2, w2, c, 2, 2)
                            .transpose(0, 3, 1, 4, 2).reshape(2 * h2, 2 * w2, c))
    return dx


# -- optimisation -----------------------------------------------------------

def sgd_momentum_step(params, lr, momentum, weight_decay):
    """One SGD step with momentum and L2 decay; clears the gradients.

    ``v <- momentum * v + grad + weight_decay * value``; ``value <- value - lr * v``.
    Raises ``FloatingPointError`` (before touching any tensor) if a gradient
    or parameter value is not finite.
    """
    params = list(params)
    bad = [p.name for p in params
           if not (np.all(np.isfinite(p.grad)) and np.all(np.isfinite(p.value)))]
    if bad:
        raise FloatingPointError(f"non-finite gradient or value in {', '.join(bad)}")
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        if weight_decay:
            p.velocity += weight_decay * p.value
        if lr:
            p.value -= lr * p.velocity
        p.zero_grad()


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def error(self):
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.numeric))


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def passed(self):
        return all(e.error <= self.tolerance for e in self.entries)

    @property
    def max_error(self):
        return max((e.error for e in self.entries), default=0.0)

    def failures(self):
        return [e for e in self.entries if e.error > self.tolerance]


def grad_check(loss_fn, params, epsilon=1e-4, tolerance=1e-3, samples=None, rng=None):
    """Compare analytic gradients with central differences.

    ``loss_fn(backward)`` must return the scalar loss and, when ``backward``
    is true, accumulate gradients into ``param.grad``. ``samples`` maps a
    parameter name to the number of coordinates to probe (all when omitted).
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    params = list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.zero_grad()
    loss_fn(True)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    entries = []
    for p in params:
        n = p.size if samples is None else min(samples.get(p.name, 0), p.size)
        if n == 0:
            continue
        flat_idx = rng.choice(p.size, size=n, replace=False) if n < p.size else np.arange(p.size)
        flat = p.value.reshape(-1)
        for fi in flat_idx:
            orig = flat[fi]
            flat[fi] = orig + epsilon
            plus = loss_fn(False)
            flat[fi] = orig - epsilon
            minus = loss_fn(False)
            flat[fi] = orig
            idx = np.unravel_index(fi, p.shape)
            entries.append(GradCheckEntry(p.name, tuple(int(i) for i in idx),
                                          float(analytic[p.name][idx]),
                                          (plus - minus) / (2.0 * epsilon)))
    return GradCheckReport(entries, tolerance)
