"""Dense tensors with reverse-mode automatic differentiation.

Every network operation in this package is built from the op set below.
A :class:`Tensor` wraps a numpy float array; ops record their inputs and a
backward closure on the output, so calling :meth:`Tensor.backward` on a
scalar result propagates exact gradients through the recorded graph in
reverse topological order.

Conventions, fixed here and relied on everywhere else:

* ``conv2d`` is cross-correlation (no kernel flip).
* ``bilinear_upsample`` uses the align-corners=false convention: output
  pixel ``i`` samples source coordinate ``(i + 0.5) * in/out - 0.5``,
  neighbor indices clamped to the valid range (edge replication).
* Values produced by an op are treated as immutable; only leaf parameters
  are rebound between optimizer steps.
* Training runs in 32-bit; gradient checks run in 64-bit, where central
  differences are actually trustworthy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A dense n-d float array plus optional gradient bookkeeping.

    Leaf tensors created with ``requires_grad=True`` start with a zero
    gradient and accumulate across backward passes until ``zero_grad`` is
    called (one momentum-style optimizer step owns exactly one batch of
    gradients). Op outputs carry the closures needed to push gradients
    back to their inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(arr) if self.requires_grad else None
        )
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> "Tensor":
        """New leaf with converted data; does not join any graph."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- autodiff core -------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into leaf grads.

        Each recorded node is visited exactly once, after all of its
        consumers, so its incoming gradient is complete when its backward
        closure runs.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        # intermediate grads are only scratch space for the sweep
        for node in topo:
            if node._backward_fn is not None and node is not self:
                node.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and combining ops --------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; numpy broadcasting allowed (gate maps need it)."""
    if not isinstance(b, Tensor):
        bval = float(b)
        out = _make(a.data + bval, (a,), lambda g: a._accumulate(g))
        return out
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; numpy broadcasting allowed."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: a._accumulate(g * c))


def combine(xs: Sequence[Tensor], mode: str = "add", axis: int = 0) -> Tensor:
    """Fold tensors by elementwise add/mul or concatenate along ``axis``."""
    if mode == "add":
        out = xs[0]
        for x in xs[1:]:
            if x.shape != out.shape:
                raise ShapeError(f"combine add: shapes {out.shape} vs {x.shape}")
            out = add(out, x)
        return out
    if mode == "mul":
        out = xs[0]
        for x in xs[1:]:
            if x.shape != out.shape:
                raise ShapeError(f"combine mul: shapes {out.shape} vs {x.shape}")
            out = mul(out, x)
        return out
    if mode == "concat":
        return concat(xs, axis=axis)
    raise ValueError(f"combine: unknown mode {mode!r}")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}"
            )
    data = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g: np.ndarray) -> None:
        for x, piece in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(piece)

    return _make(data, tuple(xs), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * data)

    return _make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g / x.data)

    return _make(data, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)
    sign = np.sign(x.data)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * sign)

    return _make(data, (x,), backward)


def power(x: Tensor, p: float) -> Tensor:
    """x**p for a scalar exponent (used for inverse square roots)."""
    data = x.data ** p

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * p * x.data ** (p - 1.0))

    return _make(data, (x,), backward)


# -- shape ops -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    orig = x.shape

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.reshape(orig))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        x._accumulate(g.transpose(inverse))

    return _make(data, (x,), backward)


# -- reductions ------------------------------------------------------------------


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g: np.ndarray) -> None:
        gg = g
        if not keepdims:
            for a in sorted(axes):
                gg = np.expand_dims(gg, a)
        x._accumulate(np.broadcast_to(gg, shape).copy())

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return scale(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d operands or stacks with broadcastable batch dims.

    Gradients flow to both operands; broadcast batch dims are summed out.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; max-subtracted for stability.

    Slices along the chosen axis are positive and sum to 1. For a matrix,
    ``axis=-1`` normalizes rows, ``axis=-2`` normalizes columns.
    """
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - dot))

    return _make(out, (x,), backward)


# -- spatial ops ---------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of NCHW input with OCKK kernels, zero padding.

    Output spatial dims are ``floor((H + 2*pad - kh) / stride) + 1`` (same
    for W). The kernel is not flipped.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match kernel {w.shape}"
        )
    bsz, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, win + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    data = np.einsum("bcxykl,ockl->boxy", windows, w.data, optimize=True)

    def backward(g: np.ndarray) -> None:
        if w.requires_grad:
            gw = np.einsum("bcxykl,boxy->ockl", windows, g, optimize=True)
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.einsum("boxy,oc->bcxy", g, w.data[:, :, i, j],
                                        optimize=True)
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += contrib
            if pad:
                gxp = gxp[:, :, pad:pad + h, pad:pad + win]
            x._accumulate(gxp)

    return _make(data, (x, w), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions per channel: NCHW -> NC11."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-d input, got {x.shape}")
    return tmean(x, axis=(2, 3), keepdims=True)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (spatial dims must be even)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {x.shape}")
    r = reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return tmean(r, axis=(3, 5))


def _interp_axis(n_in: int, n_out: int):
    """Align-corners=false source indices and weights for one axis."""
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    return lo_c, hi_c, frac


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation of NCHW maps to (out_h, out_w), out >= in."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bilinear_upsample: target dims must be positive, "
                         f"got ({out_h}, {out_w})")
    b, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(
            f"bilinear_upsample: target ({out_h}, {out_w}) smaller than input "
            f"({h}, {w}); this op only upsamples"
        )
    if (out_h, out_w) == (h, w):
        return reshape(x, x.shape)  # identity, still differentiable

    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    w00, w01 = wy0 * wx0, wy0 * wx1
    w10, w11 = wy1 * wx0, wy1 * wx1

    d = x.data
    data = (d[:, :, y0[:, None], x0[None, :]] * w00
            + d[:, :, y0[:, None], x1[None, :]] * w01
            + d[:, :, y1[:, None], x0[None, :]] * w10
            + d[:, :, y1[:, None], x1[None, :]] * w11)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(d)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x0[None, :]), g * w00)
        np.add.at(gx, (slice(None), slice(None), y0[:, None], x1[None, :]), g * w01)
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x0[None, :]), g * w10)
        np.add.at(gx, (slice(None), slice(None), y1[:, None], x1[None, :]), g * w11)
        x._accumulate(gx)

    return _make(data.astype(d.dtype, copy=False), (x,), backward)


# -- gradient verification ----------------------------------------------------------


def gradcheck(f: Callable[[], Tensor], inputs: Iterable[Tensor],
              eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and must return a scalar Tensor computed from
    the given inputs (directly or through closures, e.g. module weights).
    Inputs must be 64-bit; the error denominator is ``max(1, |a|, |n|)`` so
    near-zero gradients cannot blow the ratio up.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"gradcheck: eps must be in [1e-7, 1e-3], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck: inputs must be float64")
        if not t.requires_grad:
            raise ValueError("gradcheck: inputs must require gradients")
        t.zero_grad()

    out = f()
    if out.size != 1:
        raise ValueError(f"gradcheck: f must be scalar-valued, got {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    max_err = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
