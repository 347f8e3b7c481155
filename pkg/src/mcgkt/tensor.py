"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operations the deraining network needs are provided. Every
operation records a node on the graph of its output tensor; ``backward``
linearises the reachable nodes into a :class:`Tape` ordered by recording
sequence and walks it in reverse.

Tensors keep the dtype of the array they were built from. Model code runs in
float32; gradient checks run the same code in float64.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_op_counter = itertools.count(1)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded operation: inputs, output and the closure computing input grads."""

    __slots__ = ("op_id", "name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: tuple, backward_fn: Callable):
        self.op_id = next(_op_counter)
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op_id}, {self.name})"


class Tensor:
    """An n-d float array with an optional gradient buffer.

    Feature maps are 4-d ``(batch, channels, height, width)``; dense layers use
    2-d ``(batch, features)`` and losses are 0-d.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
    def tape_id(self) -> Optional[int]:
        return None if self.node is None else self.node.op_id

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], name: str, backward_fn) -> Tensor:
    """Wrap an op result; record a node only if some input needs a gradient."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, tuple(inputs), backward_fn)
    return out


class Tape:
    """Operations reachable from one output, in recording order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.op_id in seen:
                continue
            seen.add(node.op_id)
            nodes.append((node, t))
            stack.extend(node.inputs)
        nodes.sort(key=lambda pair: pair[0].op_id)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def backward(self, output: Tensor, seed: Optional[np.ndarray] = None):
        grads = {id(output): np.ones_like(output.data) if seed is None else seed}
        holders = {id(output): output}
        for node, out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            _accumulate(out, g)
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    holders[key] = inp
        # whatever is left belongs to leaves
        for key, g in grads.items():
            _accumulate(holders[key], g)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    Tape.trace(loss).backward(loss)


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), "relu",
                 lambda g: (g * mask,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _make(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), "tanh", lambda g: (g * (1 - t * t),))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(dtype=np.float64), dtype=dtype), (x,), "sum",
                 lambda g: (np.full(shape, g, dtype=dtype),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element."""
    target = as_tensor(target)
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    val = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=pred.dtype)
    scale = 2.0 / n
    return _make(val, (pred, target), "mse_loss",
                 lambda g: (g * scale * diff, -g * scale * diff))


# ------------------------------------------------------------- channel layout

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    return concat([a, b], axis=1)


def split_channels(x: Tensor, parts: int) -> list:
    """Split a ``[N, parts*C, H, W]`` tensor into ``parts`` equal channel groups."""
    c = x.shape[1]
    if c % parts:
        raise ShapeError(f"cannot split {c} channels into {parts} groups")
    k = c // parts
    outs = []
    for i in range(parts):
        sl = slice(i * k, (i + 1) * k)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[:, sl] = g
            return (full,)

        outs.append(_make(x.data[:, sl], (x,), "split", bw))
    return outs


def channel_scale(x: Tensor, z: Tensor) -> Tensor:
    """Multiply channel ``c`` of ``x`` by ``z[:, c]``."""
    if x.ndim != 4 or z.ndim != 2 or z.shape != x.shape[:2]:
        raise ShapeError(f"channel_scale: x {x.shape} incompatible with z {z.shape}")
    xd, zd = x.data, z.data
    zb = zd[:, :, None, None]
    return _make(xd * zb, (x, z), "channel_scale",
                 lambda g: (g * zb, (g * xd).sum(axis=(2, 3))))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[N, C, H, W] -> [N, C]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool needs non-empty spatial dims")
    inv = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(2, 3)), (x,), "global_avg_pool", bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` on ``[N, Din]`` rows."""
    if x.ndim != 2:
        x = _flatten(x)
    if weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    return _make(xd @ wd.T + bias.data, (x, weight, bias), "dense",
                 lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def _flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), "flatten", lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------- resampling

def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects a 4-d tensor, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2 or h == 0 or w == 0:
        raise ShapeError(f"maxpool2x2 needs even positive H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return _make(out, (x,), "maxpool2x2", bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every element into a 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects a 4-d tensor, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), "upsample_nearest2x",
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _correlate(xp: np.ndarray, w: np.ndarray):
    """Valid cross-correlation of a padded input; returns output and column matrix."""
    n = xp.shape[0]
    cout, _, kh, kw = w.shape
    cols, ho, wo = _im2col(xp, kh, kw)
    out = cols @ w.reshape(cout, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    return out, cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``padding="same"`` keeps H and W (odd kernels only); ``"valid"`` shrinks
    them by ``k - 1``. Only ``stride=1`` is supported.
    """
    if stride != 1:
        raise ShapeError("conv2d supports stride 1 only")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if h <= 0 or w <= 0:
        raise ShapeError(f"conv2d: non-positive spatial dims {h}x{w}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: {h}x{w} input smaller than {kh}x{kw} kernel")
    else:
        raise ShapeError(f"unknown padding {padding!r}")

    wd = weight.data
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    out, cols = _correlate(xp, wd)
    out += bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            gw = (g2.T @ cols).reshape(wd.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            qh, qw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
            wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(gp, wflip)
        return gx, gw, gb

    return _make(out, (x, weight, bias), "conv2d", bw)
