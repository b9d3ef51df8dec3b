"""Reverse-mode automatic differentiation on dense float64 arrays.

Every primitive records a node on the active :class:`Tape`. Backward rules are
themselves written with primitives, so a gradient computed with
``create_graph=True`` is again a taped tensor and can be differentiated a
second time. That is how :func:`hvp` obtains exact Hessian-vector products.

Example
-------
>>> tape = Tape()
>>> w = tape.watch(np.array(3.0))
>>> loss = w * w
>>> tape.gradient(loss, [w])[0]
array(6.)
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeError",
    "constant",
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "power",
    "clip",
    "sum",
    "mean",
    "reshape",
    "concat",
    "log_softmax",
    "softmax",
    "linear",
    "scale_gradient",
    "stop_gradient",
    "hvp",
]


class TapeError(RuntimeError):
    """Misuse of a tape: backward before forward, reuse after release, mixed tapes."""


class NonFiniteError(FloatingPointError):
    def __init__(self, node_index: int | None, op: str):
        self.node_index = node_index
        self.op = op
        where = "untaped op" if node_index is None else f"node {node_index}"
        super().__init__(f"non-finite value produced by {op!r} at {where}")


_RECORDING = [True]


@contextlib.contextmanager
def _paused():
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    """A float64 array, optionally bound to a tape position."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: "Tape | None" = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        where = "" if self.tape is None else f", node={self.index}"
        return f"Tensor({self.data!r}{where})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of primitive ops.

    Nodes are appended as ops execute, so tape order is a topological order.
    A gradient sweep visits each node at most once, from the root backwards.
    Unless ``retain=True`` or ``create_graph=True`` the tape is released after
    the sweep and further gradient requests raise :class:`TapeError`.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node | None] = []
        self.check_finite = check_finite
        self.released = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register a leaf (a parameter or an input to differentiate against)."""
        if self.released:
            raise TapeError("tape already released by a previous backward pass")
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(None)
        return t

    def _record(self, op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
        index = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(index, op)
        self.nodes.append(_Node(op, inputs, vjp))
        return Tensor(out, self, index)

    def gradient(
        self,
        root: Tensor,
        sources: Sequence[Tensor],
        create_graph: bool = False,
        retain: bool = False,
    ) -> list:
        """Gradients of scalar ``root`` with respect to each of ``sources``.

        Returns numpy arrays, or taped Tensors when ``create_graph`` is set.
        Sources the root does not depend on get zeros.
        """
        if self.released:
            raise TapeError("backward already ran on this tape; re-run forward first")
        if root.tape is not self or not self.nodes:
            raise TapeError("root was not produced by a forward pass on this tape")
        if root.data.size != 1:
            raise TapeError(f"root must be scalar, got shape {root.shape}")

        adj: dict[int, Tensor] = {root.index: Tensor(np.ones_like(root.data))}
        ctx = contextlib.nullcontext() if create_graph else _paused()
        with ctx:
            for i in range(root.index, -1, -1):
                g = adj.get(i)
                node = self.nodes[i]
                if g is None or node is None:
                    continue
                if not create_graph:
                    del adj[i]
                for inp, gi in zip(node.inputs, node.vjp(g)):
                    if gi is None or inp.tape is not self:
                        continue
                    prev = adj.get(inp.index)
                    adj[inp.index] = gi if prev is None else add(prev, gi)

        out = []
        for s in sources:
            g = adj.get(s.index) if s.tape is self else None
            if g is None:
                g = Tensor(np.zeros_like(s.data))
            out.append(g if create_graph else g.data.copy())
        if not (create_graph or retain):
            self.released = True
        return out


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(*ts: Tensor) -> Tape | None:
    if not _RECORDING[-1]:
        return None
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands live on different tapes")
            tape = t.tape
    if tape is not None and tape.released:
        raise TapeError("tape already released by a previous backward pass")
    return tape


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(None, op)
        return Tensor(out)
    return tape._record(op, out, inputs, vjp)


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    r = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(r, shape)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = constant(a)
    if a.shape == shape:
        return a
    out = np.broadcast_to(a.data, shape).copy()
    src = a.shape
    return _emit("broadcast", out, (a,), lambda g: (_sum_to(g, src),))


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def neg(a) -> Tensor:
    a = constant(a)
    return _emit("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)),
    )


def power(a, p: float) -> Tensor:
    a = constant(a)
    p = float(p)
    return _emit(
        "pow", np.power(a.data, p), (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),)
    )


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a) -> Tensor:
    a = constant(a)
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (transpose(g),))


def exp(a) -> Tensor:
    a = constant(a)

    def vjp(g):
        return (mul(g, out),)

    out = _emit("exp", np.exp(a.data), (a,), vjp)
    return out


def log(a) -> Tensor:
    a = constant(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.data)
    return _emit("log", val, (a,), lambda g: (mul(g, power(a, -1.0)),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _emit("relu", a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def sigmoid(a) -> Tensor:
    a = constant(a)

    def vjp(g):
        return (mul(g, mul(out, add(1.0, neg(out)))),)

    out = _emit("sigmoid", 1.0 / (1.0 + np.exp(-a.data)), (a,), vjp)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is strictly inside."""
    a = constant(a)
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(np.float64))
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (broadcast_to(reshape(g, out.shape), shape),)

    val = out if keepdims else a.data.sum(axis=axis)
    return _emit("sum", np.asarray(val), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (reshape(g, src),))


def getitem(a, key) -> Tensor:
    a = constant(a)
    src = a.shape
    return _emit("getitem", np.array(a.data[key]), (a,), lambda g: (_scatter(g, key, src),))


def _scatter(g: Tensor, key, shape) -> Tensor:
    out = np.zeros(shape)
    out[key] = g.data
    return _emit("scatter", out, (g,), lambda h: (getitem(h, key),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(constant(t) for t in ts)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(key)))
        return tuple(grads)

    return _emit("concat", np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


def scale_gradient(a, factor: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``factor``."""
    a = constant(a)
    factor = float(factor)
    return _emit("scale_grad", a.data.copy(), (a,), lambda g: (mul(g, factor),))


def stop_gradient(a) -> Tensor:
    return Tensor(constant(a).data.copy())


def log_softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = a - shift
    return z - log(sum(exp(z), axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` with ``w`` shaped (in, out)."""
    return add(matmul(x, w), b)


def hvp(loss_eval: Callable[[Tensor], Tensor], theta, v) -> np.ndarray:
    """Exact Hessian-vector product by differentiating the gradient a second time.

    ``loss_eval`` maps a flat parameter tensor to a scalar loss tensor.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.ndim != 1 or theta.size == 0:
        raise ValueError("theta must be a non-empty flat vector")
    if v.shape != theta.shape:
        raise ValueError(f"v has shape {v.shape}, expected {theta.shape}")
    tape = Tape()
    t = tape.watch(theta)
    loss = loss_eval(t)
    (g,) = tape.gradient(loss, [t], create_graph=True)
    gv = sum(mul(g, Tensor(v)))
    (hv,) = tape.gradient(gv, [t])
    if not np.all(np.isfinite(hv)):
        raise NonFiniteError(None, "hvp")
    return hv
