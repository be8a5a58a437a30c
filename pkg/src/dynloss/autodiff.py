"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every backward rule is written with the same recorded ops as the forward
pass. A gradient returned by :func:`grad` with ``create_graph=True`` is
therefore an ordinary tape value and can be differentiated again, which is
how Hessian-vector products and third-order terms are obtained.

Example
-------
>>> tape = Tape()
>>> x = tape.variable([1.0, 2.0, 3.0])
>>> (gx,) = grad(sum_(square(x)), [x])
>>> gx.data
array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_",
    "mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "square",
    "concat",
    "slice_",
    "gather",
    "logsumexp",
    "softmax",
    "log_softmax",
    "vdot",
    "grad",
    "hvp",
    "hvp_mixed",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class TapeError(AutodiffError):
    pass


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple
    inputs: tuple
    output: np.ndarray
    attrs: dict = field(default_factory=dict)


class Tensor:
    """A float64 array optionally bound to a node of a :class:`Tape`.

    Tensors without a node are constants: gradients never flow into them.
    """

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite values")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor({self.data!r}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)


def _wrap(data: np.ndarray, tape: "Tape | None", node: int | None) -> Tensor:
    # trusted constructor: skips the copy and the finiteness scan
    t = object.__new__(Tensor)
    t.data = data
    t.tape = tape
    t.node = node
    return t


class Tape:
    """Append-only record of operations.

    Node ids increase monotonically and are never reused, so a tensor whose
    node was dropped by :meth:`truncate` is detected instead of aliasing a
    newer node.
    """

    def __init__(self):
        self._nodes: dict[int, Node] = {}
        self._counter = itertools.count()
        self._next = 0
        self._recording = True

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def recording(self) -> bool:
        return self._recording

    def _new_id(self) -> int:
        nid = next(self._counter)
        self._next = nid + 1
        return nid

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, attrs: dict) -> Tensor:
        nid = self._new_id()
        parents = tuple(t.node if t.tape is self else None for t in inputs)
        self._nodes[nid] = Node(nid, op, parents, tuple(inputs), out, attrs)
        return _wrap(out, self, nid)

    def variable(self, value, name: str | None = None) -> Tensor:
        """Create a differentiable leaf."""
        t = Tensor(value)
        nid = self._new_id()
        self._nodes[nid] = Node(nid, "leaf", (), (), t.data, {"name": name})
        t.tape, t.node = self, nid
        return t

    def node(self, nid: int) -> Node:
        try:
            return self._nodes[nid]
        except KeyError:
            raise TapeError(f"node {nid} is not on the tape (truncated?)") from None

    def checkpoint(self) -> int:
        """Mark the current end of the tape for a later :meth:`truncate`."""
        return self._next

    def truncate(self, mark: int) -> None:
        for nid in [k for k in self._nodes if k >= mark]:
            del self._nodes[nid]

    @contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield self
        finally:
            self._recording = prev

    def replay(self) -> bool:
        """Recompute every node from its saved inputs; True if all outputs match bitwise."""
        for node in self._nodes.values():
            if node.op == "leaf":
                continue
            arrays = [t.data for t in node.inputs]
            out = np.asarray(_FORWARD[node.op](*arrays, **node.attrs), dtype=np.float64)
            if out.shape != node.output.shape or not np.array_equal(out, node.output):
                return False
        return True


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _defop(name: str, forward: Callable, backward: Callable) -> None:
    _FORWARD[name] = forward
    _BACKWARD[name] = backward


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands live on different tapes")
    return tape


def _apply(op: str, inputs: Sequence, **attrs) -> Tensor:
    inputs = [_as_tensor(t) for t in inputs]
    tape = _tape_of(inputs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        # overflow is reported below as an error, not as a warning
        out = np.asarray(_FORWARD[op](*[t.data for t in inputs], **attrs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        where = f"node {tape.checkpoint()}" if tape is not None else "constant"
        raise NonFiniteError(f"non-finite output from op '{op}' ({where})")
    if tape is None or not tape._recording:
        return _wrap(out, None, None)
    return tape._record(op, inputs, out, attrs)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# -- elementwise arithmetic ---------------------------------------------------


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _apply("add", (a, b))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _apply("sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _apply("mul", (a, b))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _apply("div", (a, b))


def neg(a) -> Tensor:
    return _apply("neg", (a,))


def scale(a, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


_defop(
    "add",
    np.add,
    lambda g, out, ins, need: (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)),
)
_defop(
    "sub",
    np.subtract,
    lambda g, out, ins, need: (
        _unbroadcast(g, ins[0].shape),
        _unbroadcast(neg(g), ins[1].shape) if need[1] else None,
    ),
)
_defop(
    "mul",
    np.multiply,
    lambda g, out, ins, need: (
        _unbroadcast(mul(g, ins[1]), ins[0].shape) if need[0] else None,
        _unbroadcast(mul(g, ins[0]), ins[1].shape) if need[1] else None,
    ),
)


def _div_backward(g, out, ins, need):
    a, b = ins
    ga = _unbroadcast(div(g, b), a.shape) if need[0] else None
    gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape) if need[1] else None
    return ga, gb


_defop("div", np.divide, _div_backward)
_defop("neg", np.negative, lambda g, out, ins, need: (neg(g),))
_defop(
    "scale",
    lambda a, c: a * c,
    lambda g, out, ins, need, c: (scale(g, c),),
)


# -- linear algebra and shape ops ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _apply("matmul", (a, b))


def _matmul_backward(g, out, ins, need):
    a, b = ins
    if b.ndim == 1:
        ga = matmul(reshape(g, (-1, 1)), reshape(b, (1, -1))) if need[0] else None
        gb = matmul(transpose(a), g) if need[1] else None
        return ga, gb
    ga = matmul(g, transpose(b)) if need[0] else None
    gb = matmul(transpose(a), g) if need[1] else None
    return ga, gb


_defop("matmul", np.matmul, _matmul_backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _apply("transpose", (a,))


_defop("transpose", np.transpose, lambda g, out, ins, need: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in np.empty(a.shape, dtype=np.int8).reshape(shape).shape)
    if shape == a.shape:
        return a
    return _apply("reshape", (a,), shape=shape)


_defop(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, ins, need, shape: (reshape(g, ins[0].shape),),
)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    return _apply("broadcast_to", (a,), shape=shape)


_defop(
    "broadcast_to",
    lambda a, shape: np.array(np.broadcast_to(a, shape)),
    lambda g, out, ins, need, shape: (_unbroadcast(g, ins[0].shape),),
)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    return _apply("sum", (a,), axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def _sum_backward(g, out, ins, need, axis, keepdims):
    shape = ins[0].shape
    if axis is None:
        axis = tuple(range(len(shape)))
    if not keepdims:
        kept = tuple(1 if i in axis else n for i, n in enumerate(shape))
        g = reshape(g, kept)
    return (broadcast_to(g, shape),)


_defop("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    return scale(sum_(a, axis=ax, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError("concat shape mismatch")
    return _apply("concat", tensors, axis=axis)


def _concat_backward(g, out, ins, need, axis):
    grads, start = [], 0
    for t, nd in zip(ins, need):
        stop = start + t.shape[axis]
        key = tuple(slice(None) if i != axis else slice(start, stop) for i in range(t.ndim))
        grads.append(slice_(g, key) if nd else None)
        start = stop
    return tuple(grads)


_defop("concat", lambda *arrs, axis: np.concatenate(arrs, axis=axis), _concat_backward)


def _norm_key(key, ndim):
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, slice) for k in key):
        raise ShapeError("slice_ accepts basic slices only; use gather for index arrays")
    return key + (slice(None),) * (ndim - len(key))


def slice_(a, key) -> Tensor:
    a = _as_tensor(a)
    key = _norm_key(key, a.ndim)
    return _apply("slice", (a,), key=key)


def _unslice(g, key, shape) -> Tensor:
    return _apply("unslice", (g,), key=key, shape=shape)


def _unslice_forward(g, key, shape):
    out = np.zeros(shape)
    out[key] = g
    return out


_defop(
    "slice",
    lambda a, key: np.array(a[key]),
    lambda g, out, ins, need, key: (_unslice(g, key, ins[0].shape),),
)
_defop(
    "unslice",
    _unslice_forward,
    lambda g, out, ins, need, key, shape: (slice_(g, key),),
)


def gather(a, index) -> Tensor:
    """Pick entries of ``a`` by flat index; the result takes ``index``'s shape."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.size):
        raise ShapeError("gather index out of range")
    return _apply("gather", (a,), index=index)


def _scatter_add(g, index, shape) -> Tensor:
    return _apply("scatter_add", (g,), index=index, shape=shape)


def _scatter_forward(g, index, shape):
    out = np.zeros(int(np.prod(shape)))
    np.add.at(out, index.reshape(-1), g.reshape(-1))
    return out.reshape(shape)


_defop(
    "gather",
    lambda a, index: a.reshape(-1)[index],
    lambda g, out, ins, need, index: (_scatter_add(g, index, ins[0].shape),),
)
_defop(
    "scatter_add",
    _scatter_forward,
    lambda g, out, ins, need, index, shape: (gather(g, index),),
)


# -- nonlinearities -----------------------------------------------------------


def exp(a) -> Tensor:
    return _apply("exp", (a,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _apply("log", (a,))


def tanh(a) -> Tensor:
    return _apply("tanh", (a,))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", (a,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    return _apply("leaky_relu", (a,), slope=float(slope))


def square(a) -> Tensor:
    return _apply("square", (a,))


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_defop("exp", np.exp, lambda g, out, ins, need: (mul(g, out),))
_defop("log", np.log, lambda g, out, ins, need: (div(g, ins[0]),))
_defop("tanh", np.tanh, lambda g, out, ins, need: (mul(g, sub(1.0, square(out))),))
_defop("sigmoid", _sigmoid, lambda g, out, ins, need: (mul(g, mul(out, sub(1.0, out))),))
_defop(
    "leaky_relu",
    lambda a, slope: np.where(a > 0, a, slope * a),
    lambda g, out, ins, need, slope: (mul(g, np.where(ins[0].data > 0, 1.0, slope)),),
)
_defop("square", np.square, lambda g, out, ins, need: (mul(g, scale(ins[0], 2.0)),))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    return _apply("logsumexp", (a,), axis=axis % a.ndim, keepdims=keepdims)


def _lse_forward(a, axis, keepdims):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _lse_backward(g, out, ins, need, axis, keepdims):
    a = ins[0]
    if not keepdims:
        out = reshape(out, tuple(1 if i == axis else n for i, n in enumerate(a.shape)))
        g = reshape(g, out.shape)
    probs = exp(sub(a, out))
    return (mul(g, probs),)


_defop("logsumexp", _lse_forward, _lse_backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def vdot(a, b) -> Tensor:
    return sum_(mul(a, b))


# -- differentiation ----------------------------------------------------------


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = True) -> list[Tensor]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that ``output`` does not depend on get an exact zero gradient.
    With ``create_graph`` the returned gradients are recorded on the tape.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    zeros = [_wrap(np.zeros_like(t.data), None, None) for t in wrt]
    tape = output.tape
    if tape is None or output.node is None:
        return zeros

    seen: set[int] = set()
    stack = [output.node]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        node = tape.node(nid)
        seen.add(nid)
        stack.extend(p for p in node.parents if p is not None)
    order = sorted(seen)

    targets = {t.node for t in wrt if t.tape is tape and t.node is not None}
    needs: dict[int, bool] = {}
    for nid in order:
        node = tape._nodes[nid]
        needs[nid] = nid in targets or any(needs.get(p, False) for p in node.parents if p is not None)
    if not needs[output.node]:
        return zeros

    results: dict[int, Tensor] = {}
    cot: dict[int, Tensor] = {output.node: _wrap(np.ones_like(output.data), None, None)}
    ctx = nullcontext() if create_graph else tape.paused()
    with ctx:
        for nid in reversed(order):
            g = cot.pop(nid, None)
            if g is None:
                continue
            if nid in targets:
                results[nid] = g
            node = tape._nodes[nid]
            if node.op == "leaf":
                continue
            need = tuple(p is not None and needs.get(p, False) for p in node.parents)
            if not any(need):
                continue
            out_t = _wrap(node.output, tape, nid)
            grads = _BACKWARD[node.op](g, out_t, node.inputs, need, **node.attrs)
            for p, gp, nd in zip(node.parents, grads, need):
                if not nd or gp is None:
                    continue
                cot[p] = gp if p not in cot else add(cot[p], gp)
    out = []
    for t, z in zip(wrt, zeros):
        r = results.get(t.node) if t.tape is tape else None
        out.append(z if r is None else r)
    return out


def _as_list(x):
    return (list(x), True) if isinstance(x, (list, tuple)) else ([x], False)


def hvp_mixed(f: Tensor, p1, p2, v, create_graph: bool = False):
    """``(d^2 f / dp2 dp1) @ v``: differentiate ``<grad(f, p1), v>`` w.r.t. ``p2``.

    ``v`` is treated as a constant and must match the shapes of ``p1``.
    """
    p1s, _ = _as_list(p1)
    p2s, p2_many = _as_list(p2)
    vs, _ = _as_list(v)
    if len(vs) != len(p1s):
        raise ShapeError("v must provide one array per tensor in p1")
    vs = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in vs]
    for p, x in zip(p1s, vs):
        if p.shape != x.shape:
            raise ShapeError(f"v shape {x.shape} does not match parameter shape {p.shape}")
    g1 = grad(f, p1s, create_graph=True)
    inner = None
    for gk, vk in zip(g1, vs):
        term = vdot(gk, vk)
        inner = term if inner is None else add(inner, term)
    out = grad(inner, p2s, create_graph=create_graph)
    return out if p2_many else out[0]


def hvp(f: Tensor, params, v, create_graph: bool = False):
    """Hessian-vector product ``(d^2 f / dparams^2) @ v``."""
    return hvp_mixed(f, params, params, v, create_graph=create_graph)
