"""The layer inventory: convolution, max pooling, ReLU, fully-connected,
batch normalization, dropout, and the flatten bridge into the FC head.

Every layer implements forward(tape, x) -> Tensor and records its analytic
backward rule on the tape. Convolution is the cross-correlation form (no
kernel flip) standard in CNNs; flipping the kernel recovers the classical
signal-processing convolution, which is covered by a unit test rather than
a second code path.

In deterministic mode the conv and linear forward kernels accumulate their
inner products in ascending index order (bias first, then terms in
(channel, row, col) order), so they are bit-identical to a plain scalar
loop over the same terms.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import Parameter
from .errors import (
    KernelTooLarge,
    ShapeMismatch,
    TooFewElements,
    WindowTooLarge,
)
from .tensor import Tensor, deterministic, matmul_data, np_dtype


class Layer:
    """Minimal layer base: parameter access and train/eval mode."""

    training = True

    def parameters(self):
        return []

    def buffers(self):
        return []

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self


def he_uniform(rng, shape, fan_in, dtype):
    """Zero-mean uniform init with bound sqrt(2 / fan_in)."""
    bound = math.sqrt(2.0 / fan_in)
    return Tensor.wrap(rng.uniform(-bound, bound, size=shape).astype(np_dtype(dtype)))


def _require_rank4(x, who):
    if x.ndim != 4:
        raise ShapeMismatch(f"{who} expects NCHW input, got shape {x.shape}")


class Conv2d(Layer):
    """2-D cross-correlation with square kernels, stride, and zero padding."""

    def __init__(self, in_channels, out_channels, kernel_size,
                 stride=1, padding=0, dtype="single", rng=None, name="conv"):
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ShapeMismatch("kernel_size/stride must be >= 1 and padding >= 0")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                       fan_in, dtype),
            f"{name}.weight")
        self.bias = Parameter(Tensor((out_channels,), dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def out_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, tape, x):
        _require_rank4(x, "conv2d")
        n, c, h, w = x.shape
        k, s, p = self.kernel_size, self.stride, self.padding
        if c != self.in_channels:
            raise ShapeMismatch(f"conv2d expects {self.in_channels} channels, got {c}")
        if h + 2 * p < k or w + 2 * p < k:
            raise KernelTooLarge(
                f"kernel {k} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        wd, bd = self.weight.value.data, self.bias.value.data

        def compute(xd, wd, bd):
            return _conv2d_forward(xd, wd, bd, s, p)

        out = Tensor.wrap(compute(x.data, wd, bd))
        xp = None  # padded input, cached lazily for backward

        def backward(g):
            nonlocal xp
            if xp is None:
                xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
            dx, dw, db = _conv2d_backward(g, xp, wd, s, p)
            return dx, dw, db

        if tape is not None:
            tape.record("conv2d", [x, self.weight.value, self.bias.value],
                        out, backward, compute)
        return out


def _conv2d_forward(xd, wd, bd, stride, pad):
    n, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if deterministic():
        # start from the bias, add one (c, p, q) term at a time: the per
        # element operation order matches the naive seven-loop convolution
        out = np.broadcast_to(bd[None, :, None, None], (n, o, ho, wo)).copy()
        for ci in range(c):
            for p in range(k):
                for q in range(k):
                    xs = xp[:, ci, p:p + ho * stride:stride, q:q + wo * stride:stride]
                    out += xs[:, None, :, :] * wd[None, :, ci, p, q, None, None]
        return out
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * k * k)
    flat = cols @ wd.reshape(o, c * k * k).T + bd
    return np.ascontiguousarray(flat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _conv2d_backward(g, xp, wd, stride, pad):
    n, o, ho, wo = g.shape
    _, c, k, _ = wd.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(wd)
    db = g.sum(axis=(0, 2, 3))
    for ci in range(c):
        for p in range(k):
            for q in range(k):
                xs = xp[:, ci, p:p + ho * stride:stride, q:q + wo * stride:stride]
                dw[:, ci, p, q] = np.einsum("noij,nij->o", g, xs, optimize=False)
                dxp[:, ci, p:p + ho * stride:stride, q:q + wo * stride:stride] += \
                    np.einsum("noij,o->nij", g, wd[:, ci, p, q], optimize=False)
    if pad:
        dx = dxp[:, :, pad:-pad, pad:-pad]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


class MaxPool2d(Layer):
    """Max pooling over square windows; backward routes the gradient to the
    first maximal element of each window in row-major scan order."""

    def __init__(self, window, stride=None):
        if window < 1:
            raise ShapeMismatch("window must be >= 1")
        self.window = window
        self.stride = stride if stride is not None else window
        if self.stride < 1:
            raise ShapeMismatch("stride must be >= 1")

    def out_hw(self, h, w):
        return ((h - self.window) // self.stride + 1,
                (w - self.window) // self.stride + 1)

    def forward(self, tape, x):
        _require_rank4(x, "maxpool2d")
        n, c, h, w = x.shape
        k, s = self.window, self.stride
        if h < k or w < k:
            raise WindowTooLarge(f"window {k} exceeds input {h}x{w}")
        ho, wo = self.out_hw(h, w)

        def compute(xd):
            vals = _pool_windows(xd, k, s)
            return np.ascontiguousarray(vals.max(axis=-1))

        vals = _pool_windows(x.data, k, s)
        out = Tensor.wrap(np.ascontiguousarray(vals.max(axis=-1)))
        arg = vals.argmax(axis=-1)  # first max in row-major window order

        def backward(g):
            dx = np.zeros((n, c, h * w), dtype=g.dtype)
            rows = (np.arange(ho) * s)[:, None] + arg // k
            colz = (np.arange(wo) * s)[None, :] + arg % k
            pos = rows * w + colz
            np.add.at(dx, (np.arange(n)[:, None, None, None],
                           np.arange(c)[None, :, None, None], pos), g)
            return (dx.reshape(n, c, h, w),)

        if tape is not None:
            tape.record("maxpool2d", [x], out, backward, compute)
        return out


def _pool_windows(xd, k, s):
    windows = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
    windows = windows[:, :, ::s, ::s]
    n, c, ho, wo = windows.shape[:4]
    return windows.reshape(n, c, ho, wo, k * k)


class ReLU(Layer):
    """max(0, x); the subgradient at exactly 0 is defined as 0."""

    def forward(self, tape, x):
        xd = x.data
        out = Tensor.wrap(np.maximum(xd, 0))

        def backward(g):
            return (g * (xd > 0),)

        if tape is not None:
            tape.record("relu", [x], out, backward, lambda v: np.maximum(v, 0))
        return out


class Linear(Layer):
    """Affine map y = x W^T + b over the trailing feature axis."""

    def __init__(self, in_features, out_features, dtype="single", rng=None,
                 name="linear"):
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            he_uniform(rng, (out_features, in_features), in_features, dtype),
            f"{name}.weight")
        self.bias = Parameter(Tensor((out_features,), dtype=dtype), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, tape, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(
                f"linear expects [N, {self.in_features}], got {x.shape}")
        wd, bd = self.weight.value.data, self.bias.value.data

        def compute(xd, wd, bd):
            return matmul_data(xd, wd.T) + bd

        out = Tensor.wrap(compute(x.data, wd, bd))
        xd = x.data

        def backward(g):
            dw = matmul_data(np.ascontiguousarray(g.T), xd)
            db = g.sum(axis=0)
            dx = matmul_data(g, wd)
            return dx, dw, db

        if tape is not None:
            tape.record("linear", [x, self.weight.value, self.bias.value],
                        out, backward, compute)
        return out


class BatchNorm2d(Layer):
    """Per-channel batch normalization with learnable scale and shift.

    Train mode normalizes with the batch statistics over (N, H, W) and
    updates the running stats as r <- (1 - momentum) * r + momentum * batch.
    Eval mode normalizes with the running stats. eps sits inside the square
    root so constant inputs stay finite.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype="single",
                 name="bn"):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(Tensor((channels,), fill=1.0, dtype=dtype),
                               f"{name}.gamma")
        self.beta = Parameter(Tensor((channels,), dtype=dtype), f"{name}.beta")
        self.running_mean = Tensor((channels,), fill=0.0, dtype=dtype)
        self.running_var = Tensor((channels,), fill=1.0, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var)]

    def forward(self, tape, x):
        _require_rank4(x, "batchnorm2d")
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeMismatch(f"batchnorm2d expects {self.channels} channels, got {c}")
        gd, bd = self.gamma.value.data, self.beta.value.data
        eps = np.asarray(self.eps, dtype=x.data.dtype)

        if self.training:
            m = n * h * w
            if m < 2:
                raise TooFewElements(
                    f"train-mode batch norm needs >= 2 elements per channel, got {m}")

            def compute(xd, gd, bd):
                mu = xd.mean(axis=(0, 2, 3))
                xc = xd - mu[None, :, None, None]
                var = (xc * xc).mean(axis=(0, 2, 3))
                inv = 1.0 / np.sqrt(var + eps)
                return gd[None, :, None, None] * (xc * inv[None, :, None, None]) \
                    + bd[None, :, None, None]

            xd = x.data
            mu = xd.mean(axis=(0, 2, 3))
            xc = xd - mu[None, :, None, None]
            var = (xc * xc).mean(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + eps)
            xhat = xc * inv[None, :, None, None]
            out = Tensor.wrap(gd[None, :, None, None] * xhat + bd[None, :, None, None])

            mom = self.momentum
            self.running_mean.data[...] = (1 - mom) * self.running_mean.data + mom * mu
            self.running_var.data[...] = (1 - mom) * self.running_var.data + mom * var

            def backward(g):
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dxhat = g * gd[None, :, None, None]
                # both mu and var depend on x; the full batch gradient
                dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv ** 3
                dmu = (dxhat.sum(axis=(0, 2, 3)) * (-inv)
                       + dvar * (-2.0) * xc.mean(axis=(0, 2, 3)))
                dx = (dxhat * inv[None, :, None, None]
                      + dvar[None, :, None, None] * 2.0 * xc / m
                      + dmu[None, :, None, None] / m)
                return dx, dgamma, dbeta

            if tape is not None:
                tape.record("batchnorm2d", [x, self.gamma.value, self.beta.value],
                            out, backward, compute)
            return out

        rm, rv = self.running_mean.data, self.running_var.data
        inv = 1.0 / np.sqrt(rv + eps)

        def compute(xd, gd, bd):
            xhat = (xd - rm[None, :, None, None]) * inv[None, :, None, None]
            return gd[None, :, None, None] * xhat + bd[None, :, None, None]

        xd = x.data
        xhat = (xd - rm[None, :, None, None]) * inv[None, :, None, None]
        out = Tensor.wrap(gd[None, :, None, None] * xhat + bd[None, :, None, None])

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (gd * inv)[None, :, None, None]
            return dx, dgamma, dbeta

        if tape is not None:
            tape.record("batchnorm2d", [x, self.gamma.value, self.beta.value],
                        out, backward, compute)
        return out


class Dropout(Layer):
    """Inverted dropout: train mode zeroes with probability p and scales
    survivors by 1/(1-p); eval mode is the identity.

    The mask comes from the layer's own seeded generator. Setting ``pinned``
    redraws from the stored seed on every forward, which makes repeated
    forwards identical (required for gradient checks).
    """

    def __init__(self, rate, seed=0):
        if not 0.0 <= rate < 1.0:
            raise ShapeMismatch(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.pinned = False
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def forward(self, tape, x):
        if not self.training or self.rate == 0.0:
            return x
        rng = np.random.default_rng(self.seed) if self.pinned else self.rng
        keep = rng.random(x.shape) >= self.rate
        scale = 1.0 / (1.0 - self.rate)
        factor = keep.astype(x.data.dtype) * np.asarray(scale, dtype=x.data.dtype)
        out = Tensor.wrap(x.data * factor)

        def backward(g):
            return (g * factor,)

        if tape is not None:
            tape.record("dropout", [x], out, backward, lambda v: v * factor)
        return out


class Flatten(Layer):
    """Collapse [N, C, H, W] to [N, C*H*W]; a metadata-only reshape."""

    def forward(self, tape, x):
        _require_rank4(x, "flatten")
        n = x.shape[0]
        shape = x.shape
        out = x.reshape((n, x.size // n if n else 0))

        def backward(g):
            return (g.reshape(shape),)

        if tape is not None:
            tape.record("flatten", [x], out, backward,
                        lambda v: v.reshape(out.shape))
        return out
