"""Differentiable operations used by the network.

Convolutions are lowered to a single matrix product through an im2col view;
the transposed convolution is the adjoint of that lowering, so the two share
:func:`_im2col` / :func:`_col2im`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autograd import Function, Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), -_unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return grad * grad.dtype.type(self.factor)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return grad * self.sign


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return 2 * grad * self.a


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return np.broadcast_to(grad, self.shape).copy()


class SumSquares(Function):
    """Sum of squares over several tensors in one node."""

    def forward(self, *parts):
        self.parts = parts
        return np.asarray(np.sum([np.vdot(p, p) for p in parts]), dtype=parts[0].dtype)

    def backward(self, grad):
        return tuple(2.0 * grad * p for p in self.parts)


class SumAbs(Function):
    def forward(self, *parts):
        self.parts = parts
        return np.asarray(np.sum([np.abs(p).sum() for p in parts]), dtype=parts[0].dtype)

    def backward(self, grad):
        return tuple(grad * np.sign(p) for p in self.parts)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class LeakyReLU(Function):
    def forward(self, x, alpha: float):
        self.slope = np.where(x > 0, x.dtype.type(1), x.dtype.type(alpha))
        return x * self.slope

    def backward(self, grad):
        # sub-gradient at exactly 0 is alpha
        return grad * self.slope


class ConcatChannels(Function):
    def forward(self, *parts):
        self.bounds = np.cumsum([0] + [p.shape[1] for p in parts])
        return np.concatenate(parts, axis=1)

    def backward(self, grad):
        b = self.bounds
        return tuple(grad[:, b[i] : b[i + 1]] for i in range(len(b) - 1))


class SliceChannels(Function):
    def forward(self, x, start: int, stop: int):
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[:, self.start : self.stop] = grad
        return out


class ConcatBatch(Function):
    def forward(self, *parts):
        self.bounds = np.cumsum([0] + [p.shape[0] for p in parts])
        return np.concatenate(parts, axis=0)

    def backward(self, grad):
        b = self.bounds
        return tuple(grad[b[i] : b[i + 1]] for i in range(len(b) - 1))


class SliceBatch(Function):
    def forward(self, x, start: int, stop: int):
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[start:stop].copy()

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[self.start : self.stop] = grad
        return out


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return Scale.apply(as_tensor(a), factor=float(b))
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Abs.apply(a)


def square(a: Tensor) -> Tensor:
    return Square.apply(a)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(a)


def sum_squares(parts: Sequence[Tensor]) -> Tensor:
    return SumSquares.apply(*parts)


def sum_abs(parts: Sequence[Tensor]) -> Tensor:
    return SumAbs.apply(*parts)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return LeakyReLU.apply(x, alpha=alpha)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(
                f"concat_channels: spatial/batch mismatch {p.shape} vs {ref}"
            )
    if len(parts) == 1:
        return parts[0]
    return ConcatChannels.apply(*parts)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceChannels.apply(x, start=start, stop=stop)


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    return ConcatBatch.apply(*parts)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceBatch.apply(x, start=start, stop=stop)


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, dilation: int, padding: int):
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, dilation, padding)
    wo = _out_size(w, k, stride, dilation, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s = x.strides
    view = as_strided(
        x,
        shape=(c, k, k, n, ho, wo),
        strides=(s[1], s[2] * dilation, s[3] * dilation, s[0], s[2] * stride, s[3] * stride),
        writeable=False,
    )
    return view.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(cols, shape, k, stride, dilation, padding, ho, wo) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto an image."""
    n, c, h, w = shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(k):
        y0 = i * dilation
        for j in range(k):
            x0 = j * dilation
            out[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride, x0 : x0 + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


class Conv2d(Function):
    def forward(self, x, weight, bias, stride=1, dilation=1, padding=0):
        n = x.shape[0]
        cout, _, k, _ = weight.shape
        cols, ho, wo = _im2col(x, k, stride, dilation, padding)
        self.cols, self.weight = cols, weight
        self.cfg = (x.shape, k, stride, dilation, padding, ho, wo)
        out = weight.reshape(cout, -1) @ cols
        out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
        out += bias.reshape(1, cout, 1, 1)
        return out

    def backward(self, grad):
        xshape, k, stride, dilation, padding, ho, wo = self.cfg
        cout = grad.shape[1]
        g2 = grad.transpose(1, 0, 2, 3).reshape(cout, -1)
        w2 = self.weight.reshape(cout, -1)
        dw = (g2 @ self.cols.T).reshape(self.weight.shape)
        db = g2.sum(axis=1)
        dx = _col2im(w2.T @ g2, xshape, k, stride, dilation, padding, ho, wo)
        return dx, dw, db


class ConvTranspose2d(Function):
    def forward(self, x, weight, bias, stride=2, padding=1):
        n, cin, h, w = x.shape
        _, cout, k, _ = weight.shape
        hout = (h - 1) * stride - 2 * padding + k
        wout = (w - 1) * stride - 2 * padding + k
        self.x, self.weight = x, weight
        self.cfg = (k, stride, padding, h, w)
        x2 = x.transpose(1, 0, 2, 3).reshape(cin, -1)
        cols = weight.reshape(cin, -1).T @ x2
        out = _col2im(cols, (n, cout, hout, wout), k, stride, 1, padding, h, w)
        out += bias.reshape(1, cout, 1, 1)
        return out

    def backward(self, grad):
        k, stride, padding, h, w = self.cfg
        cin = self.x.shape[1]
        cols, _, _ = _im2col(grad, k, stride, 1, padding)
        x2 = self.x.transpose(1, 0, 2, 3).reshape(cin, -1)
        w2 = self.weight.reshape(cin, -1)
        dx = (w2 @ cols).reshape(cin, self.x.shape[0], h, w).transpose(1, 0, 2, 3)
        dw = (x2 @ cols.T).reshape(self.weight.shape)
        db = grad.sum(axis=(0, 2, 3))
        return dx, dw, db


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2D cross-correlation of an NCHW input with a (C_out, C_in, k, k) kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    if cin != x.shape[1]:
        raise ValueError(
            f"conv2d: weight expects {cin} input channels, input has {x.shape[1]} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride}/dilation={dilation}/padding={padding}")
    ho = _out_size(x.shape[2], kh, stride, dilation, padding)
    wo = _out_size(x.shape[3], kh, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: output would be empty ({ho}x{wo}) for input {x.shape}")
    if bias is None:
        bias = Tensor(np.zeros(cout))
    return Conv2d.apply(x, weight, as_tensor(bias), stride=stride, dilation=dilation, padding=padding)


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 1,
) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, k, k).

    With the network's kernel 4 / stride 2 / padding 1 the output is exactly
    twice the input size.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d_transpose expects 4D tensors, got {x.shape} and {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ValueError(
            f"conv2d_transpose: weight expects {weight.shape[0]} input channels, input has {x.shape[1]}"
        )
    k = weight.shape[2]
    hout = (x.shape[2] - 1) * stride - 2 * padding + k
    if hout <= 0 or (x.shape[3] - 1) * stride - 2 * padding + k <= 0:
        raise ValueError(f"conv2d_transpose: empty output for input {x.shape}")
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[1]))
    return ConvTranspose2d.apply(x, weight, as_tensor(bias), stride=stride, padding=padding)


# ----------------------------------------------------------------- upsampling


def _linear_interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row i holds the weights of output sample i (align_corners=False, edge clamp)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


class BilinearUpsample(Function):
    def forward(self, x, factor: int):
        self.uh = _linear_interp_matrix(x.shape[2], factor, x.dtype)
        self.uw = _linear_interp_matrix(x.shape[3], factor, x.dtype)
        return np.matmul(self.uh, x @ self.uw.T)

    def backward(self, grad):
        return np.matmul(self.uh.T, grad @ self.uw)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return BilinearUpsample.apply(x, factor=int(factor))
