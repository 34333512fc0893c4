"""Dense float tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor requiring gradients records its
parents and a backward rule on the output. :func:`backward` orders the
recorded graph into a :class:`Tape`, runs it once in reverse, writes
``.grad`` on the leaves and then releases the graph.

All arithmetic is 32-bit by default. :func:`precision` switches the default
dtype (used by the gradient checker to evaluate finite differences in
64-bit).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class _Modes(threading.local):
    """Per-thread autodiff switches, so parallel workers cannot flip each other's state."""

    dtype = np.float32
    grad_enabled = True
    detect_anomaly = False
    kink_log = None


_modes = _Modes()


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up while anomaly detection is on."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    prev, _modes.grad_enabled = _modes.grad_enabled, False
    try:
        yield
    finally:
        _modes.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    prev, _modes.dtype = _modes.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _modes.dtype = prev


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True):
    prev, _modes.detect_anomaly = _modes.detect_anomaly, enabled
    try:
        yield
    finally:
        _modes.detect_anomaly = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern at every piecewise-linear op evaluated inside the block.

    Two evaluations that yield equal lists ran on the same linear piece of
    the network, which is what a finite-difference oracle needs.
    """
    prev, _modes.kink_log = _modes.kink_log, []
    try:
        yield _modes.kink_log
    finally:
        _modes.kink_log = prev


def _note_kinks(x: np.ndarray) -> None:
    if _modes.kink_log is not None:
        _modes.kink_log.append(np.packbits(x > 0).tobytes())


def default_dtype():
    return _modes.dtype


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _modes.dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._tracked: tuple[bool, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._consumed = False
        track = _modes.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        # whether each parent was recording when this op ran; a parameter
        # frozen during the forward pass stays frozen for this graph
        out._tracked = tuple(p.requires_grad for p in parents) if track else ()
        out._backward = backward if track else None
        if _modes.detect_anomaly and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "detach"
        out._parents = ()
        out._tracked = ()
        out._backward = None
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _const(x, like: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars and arrays adopt the dtype of the tensor operand
    if isinstance(a, Tensor):
        return a, _const(b, a.data)
    return _const(a, b.data), b


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------
class Tape:
    """Topologically ordered record of the operations leading to one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p, tracked in zip(node._parents, node._tracked):
                if tracked and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def _frozen_parents(self) -> list[Tensor]:
        """Inputs recorded as untracked that have since been unfrozen."""
        on_tape = {id(n) for n in self.nodes}
        out: dict[int, Tensor] = {}
        for node in self.nodes:
            for p, tracked in zip(node._parents, node._tracked):
                if not tracked and p.requires_grad and id(p) not in on_tape:
                    out[id(p)] = p
        return list(out.values())

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        frozen = self._frozen_parents()
        for p in frozen:
            p.requires_grad = False
        try:
            self._run(root, seed)
        finally:
            for p in frozen:
                p.requires_grad = True

    def _run(self, root: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, tracked, pg in zip(node._parents, node._tracked, parent_grads):
                if pg is None or not tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def release(self) -> None:
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._tracked = ()
                node._backward = None
                node._consumed = True


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("graph already consumed by a previous backward()")
    if not loss.requires_grad or not loss._parents:
        raise RuntimeError("loss is not on the tape (nothing it depends on requires grad)")
    tape = Tape.from_output(loss)
    tape.run(loss, np.ones_like(loss.data))
    tape.release()


def first_nonfinite(root: Tensor) -> Tensor | None:
    """Earliest tensor in topological order holding NaN/Inf, if any."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents)
    for node in order:
        if not node.is_finite():
            return node
    return None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    if exponent == 0:
        return Tensor._result(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),), "pow")
    return Tensor._result(x ** exponent, (a,),
                          lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,), "log")


def tabs(a: Tensor) -> Tensor:
    x = a.data
    _note_kinks(x)
    return Tensor._result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    x = a.data
    _note_kinks(x)
    return Tensor._result(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    _note_kinks(x)
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return Tensor._result(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated without overflow for large |x|."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor._result(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def activation(a: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------
def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0,
                               output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """(C*kh*kw, N*ho*wo) patch matrix of a padded NCHW array."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(c, kh, kw, n, ho, wo),
                     strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
                     writeable=False)
    return win.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch columns back into an NCHW array."""
    n, c = out_shape[:2]
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c) + tuple(out_shape[2:]), dtype=cols.dtype)
    view = out.transpose(1, 0, 2, 3)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            view[:, :, hi:hi + stride * (ho - 1) + 1:stride, wj:wj + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return out


def _check4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout."""
    _check4d("input", x)
    _check4d("weight", weight)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"channel mismatch: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} filters")
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if h + 2 * padding < span_h:
        raise ShapeError(f"height {h} (+2*{padding} padding) smaller than dilated kernel {span_h}")
    if w + 2 * padding < span_w:
        raise ShapeError(f"width {w} (+2*{padding} padding) smaller than dilated kernel {span_w}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    xp_shape = xp.shape

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dxp = _col2im(wmat.T @ gm, xp_shape, kh, kw, stride, dilation, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            gw = (gm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Fractionally strided convolution; the adjoint of :func:`conv2d` with the same geometry.

    ``weight`` is laid out (in_channels, out_channels, kh, kw).
    """
    _check4d("input", x)
    _check4d("weight", weight)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must be in [0, stride={stride}), got {output_padding}")
    n, c, h, w = x.shape
    wc, f, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"channel mismatch: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f} output channels")
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"padding {padding} leaves an empty output")
    full = (n, f, (h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding)

    xm = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wmat = weight.data.reshape(c, f * kh * kw)
    buf = _col2im(wmat.T @ xm, full, kh, kw, stride, 1, h, w)
    out = buf[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)

    def bw(g):
        gx = gw = gb = None
        gfull = np.zeros(full, dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        cols = _im2col(gfull, kh, kw, stride, 1, h, w)
        if x.requires_grad:
            gx = (wmat @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = (xm @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(np.ascontiguousarray(out), parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# Padding, normalization, dropout
# ---------------------------------------------------------------------------
def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    idx = np.abs(idx)
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def reflection_pad2d(x: Tensor, pad: int) -> Tensor:
    _check4d("input", x)
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")
    h, w = x.shape[2:]
    if pad >= h or pad >= w:
        raise ShapeError(f"reflection pad {pad} must be smaller than spatial extent {h}x{w}")
    if pad == 0:
        return Tensor._result(x.data.copy(), (x,), lambda g: (g,), "reflection_pad2d")
    ih, iw = _reflect_index(h, pad), _reflect_index(w, pad)
    out = x.data[:, :, ih][:, :, :, iw]

    def bw(g):
        gw = np.zeros(g.shape[:3] + (w,), dtype=g.dtype)
        np.add.at(gw, (slice(None), slice(None), slice(None), iw), g)
        gh = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
        np.add.at(gh, (slice(None), slice(None), ih), gw)
        return (gh,)

    return Tensor._result(out, (x,), bw, "reflection_pad2d")


def instance_norm2d(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial standardization with no affine parameters."""
    _check4d("input", x)
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return ((g - gm - xhat * gx) * inv,)

    return Tensor._result(xhat.astype(xd.dtype, copy=False), (x,), bw, "instance_norm2d")


def dropout(x: Tensor, rate: float, seed, active: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so no rescale is needed at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# Pooling and resampling (all separable linear maps on H and W)
# ---------------------------------------------------------------------------
def _separable(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    mh = mh.astype(x.dtype)
    mw = mw.astype(x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data, mw, optimize=True)
    return Tensor._result(out, (x,),
                          lambda g: (np.einsum("ih,ncij,jw->nchw", mh, g, mw, optimize=True),), op)


def adaptive_pool_matrix(size: int, bins: int) -> np.ndarray:
    m = np.zeros((bins, size))
    for i in range(bins):
        start = (i * size) // bins
        end = -((-(i + 1) * size) // bins)
        m[i, start:end] = 1.0 / (end - start)
    return m


def avg_pool_matrix(size: int, kernel: int, stride: int) -> np.ndarray:
    out = (size - kernel) // stride + 1
    m = np.zeros((out, size))
    for i in range(out):
        m[i, i * stride:i * stride + kernel] = 1.0 / kernel
    return m


def pool2d(x: Tensor, kind: str = "adaptive_avg", bins: int | None = None,
           kernel: int | None = None, stride: int | None = None) -> Tensor:
    """``kind='avg'`` is a fixed-window mean pool; ``'adaptive_avg'`` pools into ``bins`` x ``bins``."""
    _check4d("input", x)
    h, w = x.shape[2:]
    if kind == "adaptive_avg":
        if bins is None or bins < 1:
            raise ValueError("adaptive_avg needs bins >= 1")
        if bins > h or bins > w:
            raise ShapeError(f"bins {bins} exceed spatial extent {h}x{w}")
        return _separable(x, adaptive_pool_matrix(h, bins), adaptive_pool_matrix(w, bins), "adaptive_avg_pool2d")
    if kind == "avg":
        if kernel is None or kernel < 1:
            raise ValueError("avg pooling needs kernel >= 1")
        stride = stride or kernel
        if kernel > h or kernel > w:
            raise ShapeError(f"kernel {kernel} exceeds spatial extent {h}x{w}")
        return _separable(x, avg_pool_matrix(h, kernel, stride), avg_pool_matrix(w, kernel, stride), "avg_pool2d")
    raise ValueError(f"unknown pooling kind {kind!r}")


def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Interpolation weights with the align_corners=False (half-pixel) convention."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4d("input", x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    return _separable(x, bilinear_matrix(h, out_h), bilinear_matrix(w, out_w), "upsample_bilinear")
