"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every tracked operation appends a node to the active :class:`Tape`.  A node
keeps only the arrays its backward rule needs, and the tape counts both the
nodes and the scalars they retain so that memory claims can be measured.

Parameters are leaves: they live outside any tape and receive gradients into
a :class:`GradMap` keyed by parameter name.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


_dtype = np.dtype(np.float64)


def default_dtype() -> np.dtype:
    return _dtype


def set_default_dtype(dtype) -> None:
    """Process-wide dtype for new tensors (float64 unless running --f32)."""
    global _dtype
    _dtype = np.dtype(dtype)


class ShapeError(ValueError):
    """Input shapes are invalid for an operation."""


class GradientError(RuntimeError):
    """backward() called on something that cannot be differentiated."""


class Leaf:
    """Gradient sink for a named parameter."""

    __slots__ = ("name",)
    id = -1

    def __init__(self, name: str):
        self.name = name


class Node:
    __slots__ = ("id", "op", "parents", "backward_fn", "tape")

    def __init__(self, op, parents, backward_fn, tape):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.id = -1


class Tape:
    """Append-only record of tracked operations.

    ``tracked_count`` is the number of nodes whose activations are retained,
    ``retained_scalars`` the number of array elements those nodes keep alive.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.tracked_count = 0
        self.retained_scalars = 0

    def append(self, node: Node, saved: int) -> None:
        node.id = len(self.nodes)
        self.nodes.append(node)
        self.tracked_count += 1
        self.retained_scalars += saved

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()


def current_tape() -> Tape:
    stack = getattr(_state, "tapes", None)
    if stack:
        return stack[-1]
    tape = getattr(_state, "default_tape", None)
    if tape is None:
        tape = _state.default_tape = Tape()
    return tape


def reset_default_tape() -> None:
    _state.default_tape = Tape()


@contextlib.contextmanager
def with_grad_disabled():
    """Everything computed inside is detached and nothing is recorded."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data, node=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.node is not None

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = "tracked" if self.tracked else "detached"
        return f"Tensor(shape={self.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn, saved=()) -> Tensor:
    """Wrap ``out``; attach a node when grad mode is on and any input is tracked.

    ``backward_fn(g)`` returns one gradient (or None) per input.  ``saved``
    lists the arrays retained by the closure, for memory accounting.
    """
    if not _grad_enabled() or not any(t.node is not None for t in inputs):
        return Tensor(out)
    tape = current_tape()
    for t in inputs:
        if isinstance(t.node, Node) and t.node.tape is not tape:
            raise GradientError(f"{op}: input recorded on a different tape")
    node = Node(op, [t.node for t in inputs], backward_fn, tape)
    tape.append(node, sum(int(np.size(a)) for a in saved if a is not None))
    return Tensor(out, node)


def _activation(t: Tensor):
    """Array to retain for backward; parameter leaves are not activations."""
    return None if isinstance(t.node, Leaf) else t.data


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul_elementwise", a, b)
    sa, sb = a.shape, b.shape
    keep_a = a.data if b.tracked else None
    keep_b = b.data if a.tracked else None

    def backward(g):
        ga = _unbroadcast(g * keep_b, sa) if keep_b is not None else None
        gb = _unbroadcast(g * keep_a, sb) if keep_a is not None else None
        return ga, gb

    saved = (
        _activation(a) if b.tracked else None,
        _activation(b) if a.tracked else None,
    )
    return _record("mul_elementwise", a.data * b.data, (a, b), backward, saved)


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions {a.shape[:-2]} vs {b.shape[:-2]}") from None
    sa, sb = a.shape, b.shape
    keep_a = a.data if b.tracked else None
    keep_b = b.data if a.tracked else None

    def backward(g):
        ga = gb = None
        if keep_b is not None:
            ga = _unbroadcast(g @ np.swapaxes(keep_b, -1, -2), sa)
        if keep_a is not None:
            gb = _unbroadcast(np.swapaxes(keep_a, -1, -2) @ g, sb)
        return ga, gb

    saved = (
        _activation(a) if b.tracked else None,
        _activation(b) if a.tracked else None,
    )
    return _record("matmul", a.data @ b.data, (a, b), backward, saved)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # (B, C, H+2, W+2) -> (B*H*W, C*9)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv2d_3x3(x, w) -> Tensor:
    """3x3 convolution, stride 1, zero "same" padding, no bias.

    x: (B, C_in, H, W); w: (C_out, C_in, 3, 3).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d_3x3: input {x.shape} incompatible with kernel {w.shape}")
    bsz, cin, hh, ww = x.shape
    cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wmat = w.data.reshape(cout, cin * 9)
    out = (_im2col(xp, hh, ww) @ wmat.T).reshape(bsz, hh, ww, cout).transpose(0, 3, 1, 2)
    keep_x = xp if w.tracked else None
    keep_w = wmat if x.tracked else None

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bsz * hh * ww, cout)
        gx = gw = None
        if keep_w is not None:
            dcols = (g2 @ keep_w).reshape(bsz, hh, ww, cin, 3, 3)
            gxp = np.zeros((bsz, cin, hh + 2, ww + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + hh, j : j + ww] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        if keep_x is not None:
            gw = (g2.T @ _im2col(keep_x, hh, ww)).reshape(w.shape)
        return gx, gw

    saved = (
        x.data if w.tracked and not isinstance(x.node, Leaf) else None,
        _activation(w) if x.tracked else None,
    )
    return _record("conv2d_3x3", np.ascontiguousarray(out), (x, w), backward, saved)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,), (mask,))


def sum_over_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_over_axis", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean_over_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean_over_axis", x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, shape).copy(),)

    return _record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logz - z[np.arange(m), labels])
    probs = np.exp(z - logz[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(m), labels] -= 1.0
        return (d * (g / m),)

    return _record("softmax_cross_entropy", np.asarray(loss), (logits,), backward, (probs,))


def euclidean_sq_dist(q, p) -> Tensor:
    """Squared distances between rows: (M, d), (C, d) -> (M, C)."""
    q, p = as_tensor(q), as_tensor(p)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"euclidean_sq_dist: feature dims differ, {q.shape} vs {p.shape}")
    qd, pd = q.data, p.data
    diff = qd[:, None, :] - pd[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def backward(g):
        gq = 2.0 * (g.sum(axis=1)[:, None] * qd - g @ pd) if q.tracked else None
        gp = 2.0 * (g.sum(axis=0)[:, None] * pd - g.T @ qd) if p.tracked else None
        return gq, gp

    return _record("euclidean_sq_dist", out, (q, p), backward, (_activation(q), _activation(p)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def index(x, key) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _record("index", np.asarray(x.data[key]), (x,), backward)


def inverse(a) -> Tensor:
    """Inverse of a (batch of) square matrices."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"inverse: expected square matrices, got {a.shape}")
    inv = np.linalg.inv(a.data)

    def backward(g):
        t = np.swapaxes(inv, -1, -2)
        return (-(t @ g @ t),)

    return _record("inverse", inv, (a,), backward, (inv,))


def straight_through_scaled(full_value: Tensor, tracked_value: Tensor, scale) -> Tensor:
    """Value of ``full_value``; gradient ``scale * g`` routed into ``tracked_value``.

    Equivalent to ``detach(full) + scale * (tracked - detach(tracked))`` but
    returns ``full_value``'s data untouched, so the forward value is exact.
    ``scale`` is a positive scalar or an array broadcastable to the shape.
    """
    if full_value.shape != tracked_value.shape:
        raise ShapeError(
            f"straight_through_scaled: full {full_value.shape} vs tracked {tracked_value.shape}"
        )
    if full_value.tracked:
        raise GradientError("straight_through_scaled: full_value must be detached")
    if not _grad_enabled():
        return Tensor(full_value.data)
    if not tracked_value.tracked:
        raise GradientError("straight_through_scaled: tracked_value carries no gradient")
    s = np.asarray(scale, dtype=tracked_value.dtype)
    if np.any(s < 0):
        raise ValueError("straight_through_scaled: scale must be non-negative")
    shape = tracked_value.shape

    def backward(g):
        return (_unbroadcast(g * s, shape),)

    saved = (s,) if s.ndim else ()
    return _record("straight_through_scaled", full_value.data, (tracked_value,), backward, saved)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d_3x3": conv2d_3x3,
    "add": add,
    "mul_elementwise": mul,
    "relu": relu,
    "mean_over_axis": mean_over_axis,
    "sum_over_axis": sum_over_axis,
    "global_avg_pool": global_avg_pool,
    "softmax_cross_entropy": softmax_cross_entropy,
    "euclidean_sq_dist": euclidean_sq_dist,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "neg": neg,
    "reshape": reshape,
    "transpose": transpose,
    "index": index,
    "inverse": inverse,
    "straight_through_scaled": straight_through_scaled,
}


def apply(op_kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradients


class GradMap(dict):
    """Parameter name -> accumulated gradient array."""

    def zero(self) -> None:
        for v in self.values():
            v.fill(0.0)

    def merge(self, other: "GradMap") -> None:
        for k, v in other.items():
            self[k] += v

    def copy(self) -> "GradMap":
        return GradMap({k: v.copy() for k, v in self.items()})


def backward(loss: Tensor, params, grads: GradMap | None = None) -> GradMap:
    """Accumulate d(loss)/d(param) for every parameter in ``params``.

    ``grads`` defaults to the store's own buffers.  Parameters the loss does
    not reach keep their (zero, unless accumulated) entries.  The tape is not
    consumed, so calling twice doubles the result.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise GradientError("backward: loss is detached from any tape")
    if grads is None:
        grads = params.grad
    for name in params.names():
        if name not in grads:
            grads[name] = np.zeros_like(params[name].data)

    root = loss.node
    if isinstance(root, Leaf):
        grads[root.name] += np.ones_like(grads[root.name])
        return grads
    buffers: dict[int, np.ndarray] = {root.id: np.ones_like(loss.data)}
    nodes = root.tape.nodes
    for i in range(root.id, -1, -1):
        g = buffers.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent is None or pg is None:
                continue
            if isinstance(parent, Leaf):
                if parent.name in grads:
                    grads[parent.name] += pg
            elif parent.id in buffers:
                buffers[parent.id] = buffers[parent.id] + pg
            else:
                buffers[parent.id] = pg
    return grads
