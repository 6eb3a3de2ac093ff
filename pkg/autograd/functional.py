# autograd/functional.py
"""
Layer primitives: dilated convolution, batch normalization, pooling,
bilinear interpolation, activations and the per-pixel segmentation loss.

Convolution and pooling gather their taps with strided slices of the padded
input (one slice per kernel tap), so a dilation rate r only changes where
each slice starts: tap (l, m) reads input_padded[i*s + r*l, j*s + r*m].
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from exceptions import DataError, ShapeError
from autograd.tensor import Function, Tensor, as_tensor

logger = logging.getLogger(__name__)

IGNORE_ID = 255


def _pair(value) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution; `dilation` is the tap spacing r."""

    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    dilation: int = 1
    padding: Tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ShapeError(f"kernel extents must be odd and positive, got {self.kernel}")
        if any(s < 1 for s in self.stride) or self.dilation < 1:
            raise ShapeError("stride and dilation must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ShapeError("padding must be >= 0")

    @classmethod
    def same(cls, in_channels, out_channels, kernel=3, dilation=1, stride=1, has_bias=False):
        """Padding r*(k-1)/2, which keeps the extent at stride 1."""
        pad = dilation * (kernel - 1) // 2
        return cls(in_channels, out_channels, (kernel, kernel), (stride, stride), dilation, (pad, pad), has_bias)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def effective_kernel(self) -> Tuple[int, int]:
        r = self.dilation
        return tuple(k + (k - 1) * (r - 1) for k in self.kernel)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        ekh, ekw = self.effective_kernel
        out_h = (height + 2 * self.padding[0] - ekh) // self.stride[0] + 1
        out_w = (width + 2 * self.padding[1] - ekw) // self.stride[1] + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(
                f"convolution {self.kernel} r={self.dilation} gives empty output on {height}x{width}"
            )
        return out_h, out_w


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, b=None, spec: ConvSpec = None):
        if x.ndim != 4:
            raise ShapeError(f"conv2d needs [N,C,H,W] input, got {list(x.shape)}")
        if w.shape != spec.weight_shape:
            raise ShapeError(f"weights {list(w.shape)} do not match spec {list(spec.weight_shape)}")
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
        n, c, h, wd = x.shape
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        r = spec.dilation
        out_h, out_w = spec.output_size(h, wd)

        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
        cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=x.dtype)
        for l in range(kh):
            for m in range(kw):
                cols[:, :, l, m] = xp[:, :, _window(l * r, sh, out_h), _window(m * r, sw, out_w)]
        cols = cols.reshape(n, c * kh * kw, out_h * out_w)

        w2 = w.reshape(spec.out_channels, -1)
        out = np.matmul(w2, cols).reshape(n, spec.out_channels, out_h, out_w)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)

        self.spec, self.cols, self.w2 = spec, cols, w2
        self.x_shape, self.padded_shape = x.shape, xp.shape
        self.w_shape, self.has_bias = w.shape, b is not None
        return out

    def backward(self, grad):
        spec = self.spec
        n, c, h, wd = self.x_shape
        kh, kw = spec.kernel
        sh, sw = spec.stride
        ph, pw = spec.padding
        r = spec.dilation
        out_h, out_w = grad.shape[2], grad.shape[3]
        g2 = grad.reshape(n, spec.out_channels, out_h * out_w)

        dx = dw = db = None
        if self.needs_input_grad[0]:
            dcols = np.matmul(self.w2.T, g2).reshape(n, c, kh, kw, out_h, out_w)
            dxp = np.zeros(self.padded_shape, dtype=grad.dtype)
            for l in range(kh):
                for m in range(kw):
                    dxp[:, :, _window(l * r, sh, out_h), _window(m * r, sw, out_w)] += dcols[:, :, l, m]
            dx = dxp[:, :, ph: ph + h, pw: pw + wd]
        if self.needs_input_grad[1]:
            dw = np.tensordot(g2, self.cols, axes=([0, 2], [0, 2])).reshape(self.w_shape)
        if self.has_bias:
            if self.needs_input_grad[2]:
                db = grad.sum(axis=(0, 2, 3))
            return dx, dw, db
        return dx, dw


def conv2d(x, spec: ConvSpec, weights, bias=None) -> Tensor:
    """o[n,co,i,j] = bias[co] + sum over ci,l,m of x_pad[n,ci,i*sh + r*l, j*sw + r*m] * w[co,ci,l,m]."""
    tensors = [as_tensor(x), as_tensor(weights)]
    if bias is not None:
        tensors.append(as_tensor(bias))
    return Conv2d.apply(*tensors, spec=spec)


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = field(default="train")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class BatchNorm(Function):
    name = "batch_norm"

    def forward(self, x, gamma, beta, state: BatchNormState = None):
        if x.ndim != 4 or x.shape[1] != state.channels:
            raise ShapeError(f"batch_norm over {state.channels} channels got input {list(x.shape)}")
        axes = (0, 2, 3)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        shape = (1, -1, 1, 1)
        # one value per channel has zero batch variance: normalize by running stats instead
        self.batch_stats = state.mode == "train" and count > 1
        if self.batch_stats:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = state.momentum
            state.running_mean.data = ((1 - m) * state.running_mean.data + m * mean).astype(state.running_mean.dtype)
            state.running_var.data = ((1 - m) * state.running_var.data + m * var).astype(state.running_var.dtype)
        else:
            mean = state.running_mean.data
            var = state.running_var.data
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self.xhat, self.inv_std, self.gamma, self.count = xhat, inv_std, gamma, count
        return gamma.reshape(shape) * xhat + beta.reshape(shape)

    def backward(self, grad):
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
        dgamma = (grad * self.xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * self.gamma.reshape(shape)
        if self.batch_stats:
            m = self.count
            dx = (self.inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - self.xhat * (dxhat * self.xhat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = dxhat * self.inv_std.reshape(shape)
        return dx, dgamma, dbeta


def batch_norm(x, state: BatchNormState) -> Tensor:
    """Train mode uses batch statistics and updates the running ones; frozen mode only reads them."""
    if state.mode not in ("train", "frozen"):
        raise ValueError(f"unknown batch norm mode '{state.mode}'")
    return BatchNorm.apply(as_tensor(x), state.gamma, state.beta, state=state)


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x) -> Tensor:
    return ReLU.apply(as_tensor(x))


class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x, kernel=3, stride=2, padding=1):
        if x.ndim != 4:
            raise ShapeError(f"max_pool2d needs [N,C,H,W] input, got {list(x.shape)}")
        if kernel < 1 or stride < 1 or padding < 0 or 2 * padding >= kernel + (kernel % 2):
            raise ShapeError(f"invalid pooling window k={kernel} s={stride} p={padding}")
        n, c, h, w = x.shape
        out_h = (h + 2 * padding - kernel) // stride + 1
        out_w = (w + 2 * padding - kernel) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"pooling window {kernel} does not fit {h}x{w}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        # taps in row-major order, so argmax picks the first maximum on ties
        taps = np.stack(
            [
                xp[:, :, _window(l, stride, out_h), _window(m, stride, out_w)]
                for l in range(kernel)
                for m in range(kernel)
            ]
        )
        self.argmax = taps.argmax(axis=0)
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.x_shape, self.padded_shape = x.shape, xp.shape
        return np.take_along_axis(taps, self.argmax[None], axis=0)[0]

    def backward(self, grad):
        out_h, out_w = grad.shape[2], grad.shape[3]
        dxp = np.zeros(self.padded_shape, dtype=grad.dtype)
        k, s, p = self.kernel, self.stride, self.padding
        for tap in range(k * k):
            l, m = divmod(tap, k)
            dxp[:, :, _window(l, s, out_h), _window(m, s, out_w)] += grad * (self.argmax == tap)
        h, w = self.x_shape[2], self.x_shape[3]
        return (dxp[:, :, p: p + h, p: p + w],)


def max_pool2d(x, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    return MaxPool2d.apply(as_tensor(x), kernel=kernel, stride=stride, padding=padding)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool needs [N,C,H,W] input, got {list(x.shape)}")
        self.x_shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad):
        h, w = self.x_shape[2], self.x_shape[3]
        return (np.broadcast_to(grad / (h * w), self.x_shape).copy(),)


def global_avg_pool(x) -> Tensor:
    return GlobalAvgPool.apply(as_tensor(x))


def interpolation_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """
    Rows hold bilinear weights, pixel-center convention:
    s = (d + 0.5) * in/out - 0.5, clamped to [0, in-1]. Every row sums to 1.
    """
    if out_size < 1 or in_size < 1:
        raise ShapeError(f"interpolation extents must be positive, got {in_size}->{out_size}")
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    rows = np.arange(out_size)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix.astype(dtype)


class BilinearUpsample(Function):
    name = "bilinear_upsample"

    def forward(self, x, out_h=1, out_w=1):
        if x.ndim != 4:
            raise ShapeError(f"bilinear_upsample needs [N,C,H,W] input, got {list(x.shape)}")
        self.rows = interpolation_matrix(x.shape[2], out_h, x.dtype)
        self.cols = interpolation_matrix(x.shape[3], out_w, x.dtype)
        return np.matmul(np.matmul(self.rows, x), self.cols.T)

    def backward(self, grad):
        return (np.matmul(np.matmul(self.rows.T, grad), self.cols),)


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    return BilinearUpsample.apply(as_tensor(x), out_h=int(out_h), out_w=int(out_w))


class SoftmaxCrossEntropy(Function):
    name = "softmax_cross_entropy"

    def forward(self, logits, labels=None, ignore_id=IGNORE_ID):
        if logits.ndim != 4:
            raise ShapeError(f"logits must be [N,K,H,W], got {list(logits.shape)}")
        n, k, h, w = logits.shape
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels {list(labels.shape)} do not match logits {list(logits.shape)}")
        valid = labels != ignore_id
        bad = valid & ((labels < 0) | (labels >= k))
        if bad.any():
            raise DataError(f"label ids outside [0,{k}) and not {ignore_id}: {sorted(set(labels[bad].tolist()))[:5]}")

        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        count = int(valid.sum())
        self.valid, self.count = valid, count
        self.safe = np.where(valid, labels, 0).astype(np.int64)
        self.log_probs = log_probs
        if count == 0:
            logger.warning("⚠️ every pixel carries the ignore id; loss is 0")
            return np.zeros(1, dtype=logits.dtype)
        picked = np.take_along_axis(log_probs, self.safe[:, None], axis=1)[:, 0]
        return np.array([-(picked * valid).sum() / count], dtype=logits.dtype)

    def backward(self, grad):
        if self.count == 0:
            return (np.zeros_like(self.log_probs),)
        probs = np.exp(self.log_probs)
        np.put_along_axis(
            probs,
            self.safe[:, None],
            np.take_along_axis(probs, self.safe[:, None], axis=1) - 1.0,
            axis=1,
        )
        scale = grad.reshape(-1)[0] / self.count
        return (probs * self.valid[:, None] * scale,)


def softmax_cross_entropy(logits, labels, ignore_id: int = IGNORE_ID) -> Tensor:
    """Mean of -log softmax(logits)[label] over pixels whose label is not ignore_id."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    return SoftmaxCrossEntropy.apply(as_tensor(logits), labels=labels.astype(np.int64), ignore_id=ignore_id)
