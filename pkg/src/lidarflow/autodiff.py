"""Rank-4 tensor arithmetic with tape-based reverse-mode differentiation.

Implements exactly the operator set the flow network and its warping loss
need: dilated 2-D convolution, the convolutional GRU cell, differentiable
bilinear warping, separable Gaussian blurring, pointwise nonlinearities,
and mean squared error. Tensors are dense (batch, channels, rows, cols)
arrays; gradients are obtained by replaying a recorded tape in reverse.

Not a general autodiff engine: no broadcasting beyond scalar operands, no
reshaping, no GPU. Forward ops are pure; a Tape belongs to one thread.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between operands, naming the offending axis."""

    def __init__(self, axis: str, expected, got, context: str = ""):
        self.axis = axis
        self.expected = expected
        self.got = got
        where = f" in {context}" if context else ""
        super().__init__(f"axis '{axis}'{where}: expected {expected}, got {got}")


class ParameterError(ValueError):
    """Invalid operation parameter (e.g. an even Gaussian filter size)."""


class GraphError(RuntimeError):
    """Misuse of the tape machinery (e.g. backward from a non-scalar)."""


class Tensor:
    """Dense (batch, channels, rows, cols) array, float32 or float64.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer
    that ``backward`` accumulates into; it starts (and stays, if the leaf
    never participates in a loss) exactly zero. Tensors produced by ops
    carry ``requires_grad`` but no buffer of their own.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        if arr.ndim != 4:
            raise DimensionError("rank", 4, arr.ndim, "Tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, dtype=np.float64) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Scalar/tensor arithmetic sugar; routes through the taped ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class TapeNode:
    """One recorded operation: output, inputs, and the rule mapping the
    output gradient to per-input gradients (None for non-differentiable
    inputs)."""

    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Execution-ordered record of operations for one forward computation.

    Use as a context manager; ops record themselves while the tape is
    active and any of their inputs requires gradients. Confined to the
    thread that opened it.
    """

    _stack = threading.local()

    def __init__(self):
        self._nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        stack = self._ensure_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._ensure_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @classmethod
    def _ensure_stack(cls) -> list:
        if not hasattr(cls._stack, "tapes"):
            cls._stack.tapes = []
        return cls._stack.tapes

    @classmethod
    def active(cls) -> Optional["Tape"]:
        stack = cls._ensure_stack()
        return stack[-1] if stack else None

    def record(self, output: Tensor, inputs: tuple, backward_fn) -> None:
        self._nodes.append(TapeNode(output, inputs, backward_fn))


def _finish_op(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is listening."""
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs if isinstance(t, Tensor))
    out = Tensor._result(data, needs)
    if needs:
        tape.record(out, tuple(t for t in inputs if isinstance(t, Tensor)), backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf on the tape.

    Replays the tape in reverse; nodes whose outputs do not influence the
    loss are skipped, so their leaves keep their existing (zero) grads.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.grad is not None:
        loss.grad += grads[id(loss)]
    for node in reversed(tape._nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        for tin, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not tin.requires_grad:
                continue
            if tin.grad is not None:  # leaf
                tin.grad += gin
            else:
                acc = grads.get(id(tin))
                if acc is None:
                    grads[id(tin)] = gin.copy()
                else:
                    acc += gin


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one dilated 2-D convolution layer."""

    filter_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ParameterError(f"filter_size must be odd and positive, got {self.filter_size}")
        if self.stride < 1 or self.dilation < 1:
            raise ParameterError("stride and dilation must be positive")
        if self.padding < 0:
            raise ParameterError("padding must be non-negative")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be positive")

    def out_size(self, rows: int, cols: int) -> tuple[int, int]:
        span = self.dilation * (self.filter_size - 1) + 1
        r = (rows + 2 * self.padding - span) // self.stride + 1
        c = (cols + 2 * self.padding - span) // self.stride + 1
        return r, c

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.filter_size, self.filter_size)


def _im2col(xp: np.ndarray, k: int, s: int, d: int, hout: int, wout: int) -> np.ndarray:
    """Patch matrix (B, k*k*C, hout*wout) in tap-major layout."""
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((b, k * k * c, hout * wout), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            tap = i * k + j
            patch = xp[:, :, i * d : i * d + s * hout : s, j * d : j * d + s * wout : s]
            cols[:, tap * c : (tap + 1) * c, :] = patch.reshape(b, c, hout * wout)
    return cols


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(input: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Dilated 2-D convolution (cross-correlation, the deep-learning kind)."""
    b, cin, h, w = input.shape
    if cin != spec.in_channels:
        raise DimensionError("channels", spec.in_channels, cin, "conv2d input")
    if tuple(weight.shape) != spec.weight_shape:
        raise DimensionError("weight", spec.weight_shape, tuple(weight.shape), "conv2d")
    if spec.has_bias:
        if bias is None or tuple(bias.shape) != (1, spec.out_channels, 1, 1):
            got = None if bias is None else tuple(bias.shape)
            raise DimensionError("bias", (1, spec.out_channels, 1, 1), got, "conv2d")
    elif bias is not None:
        raise ParameterError("bias given to a bias-free conv layer")
    hout, wout = spec.out_size(h, w)
    if hout < 1 or wout < 1:
        raise DimensionError("rows/cols", "positive output size", (hout, wout), "conv2d")

    k, s, d, p = spec.filter_size, spec.stride, spec.dilation, spec.padding
    o = spec.out_channels
    xp = _pad2d(input.data, p)
    cols = _im2col(xp, k, s, d, hout, wout)
    # tap-major weight matrix matching the im2col layout
    w2 = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1).reshape(o, k * k * cin))
    out = np.matmul(w2, cols).reshape(b, o, hout, wout)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward_fn(g: np.ndarray):
        g2 = g.reshape(b, o, hout * wout)
        dx = dw = db = None
        if weight.requires_grad:
            dw_flat = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            dw = np.ascontiguousarray(dw_flat.reshape(o, k, k, cin).transpose(0, 3, 1, 2))
        if input.requires_grad:
            dcol = np.matmul(w2.T, g2)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    tap = i * k + j
                    dxp[:, :, i * d : i * d + s * hout : s, j * d : j * d + s * wout : s] += dcol[
                        :, tap * cin : (tap + 1) * cin, :
                    ].reshape(b, cin, hout, wout)
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        grads = [dx, dw]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _finish_op(out, inputs, backward_fn)


# ---------------------------------------------------------------------------
# pointwise ops


def sigmoid(x: Tensor) -> Tensor:
    # 0.5*(1+tanh(x/2)) is stable for any finite x and exact at 0.
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return _finish_op(s, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - t * t),)

    return _finish_op(t, (x,), backward_fn)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                name = ("batch", "channels", "rows", "cols")[axis]
                raise DimensionError(name, da, db, op)


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")

        def backward_fn(g):
            return (g, g)

        return _finish_op(a.data + b.data, (a, b), backward_fn)
    c = float(b)

    def backward_scalar(g):
        return (g,)

    return _finish_op(a.data + c, (a,), backward_scalar)


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")

        def backward_fn(g):
            return (g, -g)

        return _finish_op(a.data - b.data, (a, b), backward_fn)
    if isinstance(a, Tensor):
        c = float(b)

        def backward_left(g):
            return (g,)

        return _finish_op(a.data - c, (a,), backward_left)
    c = float(a)

    def backward_right(g):
        return (-g,)

    return _finish_op(c - b.data, (b,), backward_right)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")

        def backward_fn(g):
            da = g * b.data if a.requires_grad else None
            db = g * a.data if b.requires_grad else None
            return (da, db)

        return _finish_op(a.data * b.data, (a, b), backward_fn)
    c = float(b)

    def backward_scalar(g):
        return (g * c,)

    return _finish_op(a.data * c, (a,), backward_scalar)


def narrow_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel slice [start, stop) as a fresh tensor."""
    if not (0 <= start < stop <= x.shape[1]):
        raise ParameterError(f"channel slice [{start}, {stop}) outside 0..{x.shape[1]}")
    out = x.data[:, start:stop].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _finish_op(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# GRU cell


@dataclass
class GruWeights:
    """The six convolution kernels of one gated recurrent layer.

    ``x_spec`` governs the input-to-hidden kernels (w_xf, w_xr, w_xy) and
    ``y_spec`` the hidden-to-hidden ones (w_yf, w_yr, w_yy). No biases.
    """

    w_xf: Tensor
    w_yf: Tensor
    w_xr: Tensor
    w_yr: Tensor
    w_xy: Tensor
    w_yy: Tensor
    x_spec: ConvSpec
    y_spec: ConvSpec

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("w_xf", self.w_xf),
            ("w_yf", self.w_yf),
            ("w_xr", self.w_xr),
            ("w_yr", self.w_yr),
            ("w_xy", self.w_xy),
            ("w_yy", self.w_yy),
        ]


def gru_cell(x: Tensor, y_prev: Tensor, weights: GruWeights) -> Tensor:
    """One step of the convolutional gated recurrent unit.

    f = sigmoid(w_xf * x + w_yf * y_prev)
    r = sigmoid(w_xr * x + w_yr * y_prev)
    y_bar = tanh(w_xy * x + r . (w_yy * y_prev))
    y = f . y_prev + (1 - f) . y_bar
    """
    if x.shape[1] != weights.x_spec.in_channels:
        raise DimensionError("channels", weights.x_spec.in_channels, x.shape[1], "gru_cell x")
    if y_prev.shape[1] != weights.y_spec.in_channels:
        raise DimensionError("channels", weights.y_spec.in_channels, y_prev.shape[1], "gru_cell y_prev")
    if x.shape[2:] != y_prev.shape[2:]:
        raise DimensionError("rows/cols", x.shape[2:], y_prev.shape[2:], "gru_cell")
    xs, ys = weights.x_spec, weights.y_spec
    f_gate = sigmoid(add(conv2d(x, weights.w_xf, None, xs), conv2d(y_prev, weights.w_yf, None, ys)))
    r_gate = sigmoid(add(conv2d(x, weights.w_xr, None, xs), conv2d(y_prev, weights.w_yr, None, ys)))
    y_bar = tanh(add(conv2d(x, weights.w_xy, None, xs), mul(r_gate, conv2d(y_prev, weights.w_yy, None, ys))))
    return add(mul(f_gate, y_prev), mul(sub(1.0, f_gate), y_bar))


# ---------------------------------------------------------------------------
# bilinear warp


def bilinear_warp(source: Tensor, flow: Tensor) -> Tensor:
    """Sample ``source`` at per-cell offset positions.

    out[b, c, y, x] = source[b, c, y + flow[b,1,y,x], x + flow[b,0,y,x]]
    with bilinear interpolation; positions outside the grid read as zero.
    Flow channel 0 is the column offset (dx), channel 1 the row offset (dy),
    both in cell units. Differentiable in source and flow everywhere
    (piecewise-linear in flow).
    """
    if flow.shape[1] != 2:
        raise DimensionError("channels", 2, flow.shape[1], "bilinear_warp flow")
    if source.shape[0] != flow.shape[0]:
        raise DimensionError("batch", source.shape[0], flow.shape[0], "bilinear_warp")
    if source.shape[2:] != flow.shape[2:]:
        raise DimensionError("rows/cols", source.shape[2:], flow.shape[2:], "bilinear_warp")

    b, c, h, w = source.shape
    sx = np.arange(w, dtype=source.dtype)[None, None, :] + flow.data[:, 0]
    sy = np.arange(h, dtype=source.dtype)[None, :, None] + flow.data[:, 1]
    with np.errstate(invalid="ignore"):  # non-finite flow surfaces as NaN output
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    bidx = np.arange(b)[:, None, None]
    src_hwc = np.moveaxis(source.data, 1, -1)  # (B, H, W, C) view

    def corner(yc, xc):
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        vals = src_hwc[bidx, yc.clip(0, h - 1), xc.clip(0, w - 1)]
        vals = vals * valid[..., None].astype(source.dtype)
        return vals, valid

    v00, m00 = corner(y0, x0)
    v01, m01 = corner(y0, x0 + 1)
    v10, m10 = corner(y0 + 1, x0)
    v11, m11 = corner(y0 + 1, x0 + 1)
    out_hwc = (
        (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
        + wy * ((1.0 - wx) * v10 + wx * v11)
    )
    out = np.ascontiguousarray(np.moveaxis(out_hwc, -1, 1))

    def backward_fn(g: np.ndarray):
        g_hwc = np.moveaxis(g, 1, -1)
        dsrc = dflow = None
        if source.requires_grad:
            acc = np.zeros_like(src_hwc)
            for vmask, wgt, yc, xc in (
                (m00, (1.0 - wy) * (1.0 - wx), y0, x0),
                (m01, (1.0 - wy) * wx, y0, x0 + 1),
                (m10, wy * (1.0 - wx), y0 + 1, x0),
                (m11, wy * wx, y0 + 1, x0 + 1),
            ):
                contrib = g_hwc * wgt * vmask[..., None]
                np.add.at(acc, (bidx, yc.clip(0, h - 1), xc.clip(0, w - 1)), contrib)
            dsrc = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
        if flow.requires_grad:
            ddx = ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10)) * g_hwc
            ddy = ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01)) * g_hwc
            dflow = np.stack((ddx.sum(axis=-1), ddy.sum(axis=-1)), axis=1)
        return (dsrc, dflow)

    return _finish_op(out, (source, flow), backward_fn)


# ---------------------------------------------------------------------------
# Gaussian filter


def gaussian_kernel(f: int, dtype=np.float64) -> np.ndarray:
    """1-D Gaussian taps of width f, sigma = f/4, normalized to sum 1."""
    if f < 1 or f % 2 == 0:
        raise ParameterError(f"filter size must be odd and positive, got {f}")
    if f == 1:
        return np.ones(1, dtype=dtype)
    sigma = f / 4.0
    offsets = np.arange(f, dtype=np.float64) - (f - 1) / 2.0
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    k /= k.sum()
    return k.astype(dtype)


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = (len(kernel) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (half, half)
    padded = np.pad(arr, pad)
    out = np.zeros_like(arr)
    index = [slice(None)] * arr.ndim
    n = arr.shape[axis]
    for m, km in enumerate(kernel):
        index[axis] = slice(m, m + n)
        out += km * padded[tuple(index)]
    return out


def gaussian_filter(map: Tensor, f: int) -> Tensor:
    """Separable f x f Gaussian blur with zero-padded borders; identity at f=1."""
    if f < 1 or f % 2 == 0:
        raise ParameterError(f"filter size must be odd and positive, got {f}")
    if f == 1:
        return map
    kernel = gaussian_kernel(f, map.dtype)

    def blur(arr):
        return _blur_axis(_blur_axis(arr, kernel, 2), kernel, 3)

    # The zero-padded blur matrix is symmetric, so it is its own adjoint.
    def backward_fn(g):
        return (blur(g),)

    return _finish_op(blur(map.data), (map,), backward_fn)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2, as a (1,1,1,1) scalar node."""
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = np.array((diff * diff).mean(), dtype=a.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        g0 = float(g.reshape(()))
        da = (2.0 * g0 / n) * diff
        return (da, -da)

    return _finish_op(out, (a, b), backward_fn)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean per-cell binary cross entropy of sigmoid(logits) against targets."""
    _check_same_shape(logits, targets, "bce_with_logits")
    z, y = logits.data, targets.data
    n = z.size
    per_cell = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.array(per_cell.mean(), dtype=z.dtype).reshape(1, 1, 1, 1)

    def backward_fn(g):
        g0 = float(g.reshape(()))
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        dz = (g0 / n) * (p - y)
        dy = (-g0 / n) * z
        return (dz, dy)

    return _finish_op(out, (logits, targets), backward_fn)
