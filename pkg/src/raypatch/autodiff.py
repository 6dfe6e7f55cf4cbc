"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run tape: ops executed inside a `Graph` context record nodes, and
`backward`/`grad` walk the tape in reverse. Every VJP is itself written in
terms of the public ops, so gradients can be differentiated again (needed for
eikonal-style gradient-of-gradient terms). Tensors created outside a graph,
or from inputs that do not require grad, are plain constants.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the op's documented domain (e.g. log of <= 0)."""


class _Node:
    __slots__ = ("op", "inputs", "vjp", "out")

    def __init__(self, op: str, inputs: tuple, vjp, out):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.out = out


class Graph:
    """Tape of operation records; context manager activating recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> "Graph":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None
        self.close()
        return False

    def close(self):
        """Break tensor<->node cycles so the tape frees by refcount alone.

        Leaving this to the cyclic collector lets several retired tapes
        stack up in memory during a training loop. Tensor `.data` and
        `.grad` survive; only the recorded operations are dropped.
        """
        for node in self.nodes:
            t = node.out
            if t is not None and t.graph is self:
                t.graph = None
                t.node_id = None
        self.nodes.clear()

    def _leaf(self, t: "Tensor") -> int:
        """Register `t` as a leaf of this graph (idempotent)."""
        if t.graph is self and t.node_id is not None:
            return t.node_id
        t.graph = self
        t.node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t))
        return t.node_id

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: Graph | None = None
_GRAD_ENABLED: bool = True


def active_graph() -> Graph | None:
    return _ACTIVE


@contextmanager
def no_grad():
    """Disable recording; ops inside produce constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array, optionally attached to the active graph.

    `data` is treated as immutable while a forward pass is running; the
    trainer mutates leaf `.data` in place only between iterations.
    """

    __slots__ = ("data", "requires_grad", "graph", "node_id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.node_id: int | None = None
        self.grad: np.ndarray | None = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    g = _ACTIVE
    if g is not None and _GRAD_ENABLED and any(i.requires_grad for i in inputs):
        for i in inputs:
            if i.requires_grad:
                g._leaf(i)
        out.requires_grad = True
        out.graph = g
        out.node_id = len(g.nodes)
        g.nodes.append(_Node(op, inputs, vjp, out))
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce cotangent `g` back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise arithmetic -------------------------------------------------

def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(mul(g, -1.0), b.shape)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")

    def vjp(g):
        ga = div(g, b)
        gb = mul(mul(g, -1.0), div(a, mul(b, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", a.data / b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatchError(f"matmul: unsupported ranks {a.ndim} and {b.ndim}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims {a.shape} @ {b.shape}")

    if a.ndim == 2 and b.ndim == 2:
        def vjp(g):
            return matmul(g, transpose(b)), matmul(transpose(a), g)
    elif a.ndim == 2 and b.ndim == 1:
        def vjp(g):
            ga = matmul(reshape(g, (-1, 1)), reshape(b, (1, -1)))
            return ga, matmul(transpose(a), g)
    elif a.ndim == 1 and b.ndim == 2:
        def vjp(g):
            gb = matmul(reshape(a, (-1, 1)), reshape(g, (1, -1)))
            return matmul(b, g), gb
    else:  # vector dot -> scalar
        def vjp(g):
            return mul(g, b), mul(g, a)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim)

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(a.shape)
            for ax in axis:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, a.shape),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))

    def vjp(g):
        if axis is not None and not keepdims:
            kshape = list(a.shape)
            for ax in axis:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return (mul(broadcast_to(g, a.shape), 1.0 / count),)

    return _record("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _record("cumsum", np.cumsum(a.data, axis=axis), (a,), vjp)


# -- elementwise nonlinearities ----------------------------------------------

def relu(a) -> Tensor:
    a = _wrap(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _record("relu", a.data * mask, (a,), vjp)


def softplus(a) -> Tensor:
    """Numerically stable ln(1 + e^x) = max(x,0) + ln(1 + e^-|x|)."""
    a = _wrap(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _record("softplus", out, (a,), vjp)


def sigmoid(a) -> Tensor:
    """Stable logistic via exp(-softplus(-x)); composition, not a primitive."""
    a = _wrap(a)
    return texp(mul(softplus(mul(a, -1.0)), -1.0))


def texp(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        # re-derive exp(a) so the VJP stays differentiable for double backward
        return (mul(g, texp(a)),)

    return _record("exp", np.exp(a.data), (a,), vjp)


def tlog(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be positive")

    def vjp(g):
        return (div(g, a),)

    return _record("log", np.log(a.data), (a,), vjp)


def tsin(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (mul(g, tcos(a)),)

    return _record("sin", np.sin(a.data), (a,), vjp)


def tcos(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (mul(mul(g, -1.0), tsin(a)),)

    return _record("cos", np.cos(a.data), (a,), vjp)


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")

    def vjp(g):
        return (mul(div(g, tsqrt(a)), 0.5),)

    return _record("sqrt", np.sqrt(a.data), (a,), vjp)


def tabs(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)

    def vjp(g):
        return (mul(g, Tensor(sign)),)

    return _record("abs", np.abs(a.data), (a,), vjp)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0.0):
        raise DomainError("pow: fractional power of negative base")

    def vjp(g):
        return (mul(mul(g, p), power(a, p - 1.0)),)

    return _record("pow", a.data ** p, (a,), vjp)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, a.shape),)

    return _record("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        inv = None
    else:
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

    def vjp(g):
        if inv is None:
            return (transpose(g, None),)
        return (transpose(g, inv),)

    return _record("transpose", np.transpose(a.data, axes), (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeMismatchError(f"broadcast: {a.shape} -> {shape}") from e
    return _record("broadcast", out, (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat: no inputs")
    ax = axis % parts[0].ndim if parts[0].ndim else 0
    extents = [p.shape[ax] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(extents)])

    def vjp(g):
        outs = []
        for k, p in enumerate(parts):
            key = [slice(None)] * p.ndim
            key[ax] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(take(g, tuple(key)))
        return tuple(outs)

    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    return _record("concat", out, tuple(parts), vjp)


def take(a, key) -> Tensor:
    """Basic slicing (slices/ints/Ellipsis); the graph op behind `t[key]`."""
    a = _wrap(a)

    def vjp(g):
        return (_scatter(g, key, a.shape),)

    return _record("slice", a.data[key].copy(), (a,), vjp)


def _scatter(g, key, shape) -> Tensor:
    """Embed cotangent `g` into zeros of `shape` at `key`; inverse of take."""
    g = _wrap(g)

    def vjp(gg):
        return (take(gg, key),)

    buf = np.zeros(shape, dtype=np.float64)
    buf[key] = g.data
    return _record("scatter", buf, (g,), vjp)


def scatter(g, key, shape) -> Tensor:
    """Place `g` into zeros of `shape` at `key`; indices must not repeat."""
    return _scatter(g, key, shape)


def flip(a, axis: int = -1) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (flip(g, axis),)

    return _record("flip", np.flip(a.data, axis=axis).copy(), (a,), vjp)


def where(mask, a, b) -> Tensor:
    """Select by a constant (non-differentiated) mask; grads flow to a and b."""
    m = Tensor(np.asarray(mask, dtype=np.float64))
    a, b = _wrap(a), _wrap(b)
    return add(mul(a, m), mul(b, sub(1.0, m)))


def maximum_const(a, c: float) -> Tensor:
    a = _wrap(a)
    return where(a.data >= c, a, Tensor(np.full(a.shape, c)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    a = where(a.data >= lo, a, Tensor(np.full(a.shape, lo)))
    return where(a.data <= hi, a, Tensor(np.full(a.shape, hi)))


# -- backward -----------------------------------------------------------------

def _ancestors(graph: Graph, node_id: int) -> set[int]:
    need = set()
    stack = [node_id]
    while stack:
        nid = stack.pop()
        if nid in need:
            continue
        need.add(nid)
        for inp in graph.nodes[nid].inputs:
            if inp.graph is graph and inp.node_id is not None and inp.requires_grad:
                stack.append(inp.node_id)
    return need


def _sweep(seed: Tensor, keep: set[int], create_graph: bool) -> dict[int, Tensor]:
    """Reverse sweep from `seed`; returns cotangents for node ids in `keep`."""
    if seed.data.size != 1:
        raise ShapeMismatchError("backward: seed must be scalar")
    graph = seed.graph
    if graph is None or seed.node_id is None:
        raise ValueError("backward: seed is not attached to a graph")
    if graph is not _ACTIVE and create_graph:
        raise ValueError("backward: create_graph requires the seed's graph to be active")

    need = _ancestors(graph, seed.node_id)
    cot: dict[int, Tensor] = {seed.node_id: Tensor(np.ones_like(seed.data))}
    kept: dict[int, Tensor] = {}

    ctx = no_grad() if not create_graph else _nullctx()
    with ctx:
        for nid in range(seed.node_id, -1, -1):
            if nid not in need or nid not in cot:
                continue
            g_out = cot.pop(nid)
            if nid in keep:
                kept[nid] = g_out
            node = graph.nodes[nid]
            if node.op == "leaf":
                t = node.out
                if t.requires_grad and not create_graph:
                    t.grad = g_out.data.copy() if t.grad is None else t.grad + g_out.data
                continue
            grads = node.vjp(g_out)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.graph is not graph or inp.node_id is None:
                    continue
                k = inp.node_id
                cot[k] = gi if k not in cot else add(cot[k], gi)
    return kept


@contextmanager
def _nullctx():
    yield


def backward(seed: Tensor):
    """Accumulate d(seed)/d(leaf) into `.grad` of every requires-grad leaf."""
    _sweep(seed, keep=set(), create_graph=False)


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Cotangents of scalar `output` w.r.t. each tensor in `wrt`.

    `wrt` entries may be leaves or intermediate graph tensors. With
    `create_graph` the returned tensors stay on the tape and can be
    differentiated again. Tensors not influencing `output` get zeros.
    """
    wrt = list(wrt)
    graph = output.graph
    ids = {}
    for t in wrt:
        if t.graph is graph and t.node_id is not None:
            ids[t.node_id] = t
    kept = _sweep(output, keep=set(ids), create_graph=create_graph)
    out = []
    for t in wrt:
        gi = kept.get(t.node_id) if t.graph is graph else None
        out.append(gi if gi is not None else Tensor(np.zeros(t.shape)))
    return out


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `f` maps a Tensor to a scalar Tensor; it may build internal graphs (each
    evaluation here runs inside a fresh one). `sample` limits the number of
    coordinates checked (all by default), drawn with `rng`.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x0 = np.asarray(x, dtype=np.float64)

    with Graph():
        xt = Tensor(x0.copy(), requires_grad=True)
        y = f(xt)
        if y.data.size != 1:
            raise ShapeMismatchError("grad_check: f must return a scalar")
        backward(y)
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)

    def feval(arr) -> float:
        with Graph():
            return float(f(Tensor(arr, requires_grad=True)).data)

    idx = np.arange(x0.size)
    if sample is not None and sample < x0.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        idx = gen.choice(x0.size, size=sample, replace=False)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        num = (feval(hi.reshape(x0.shape)) - feval(lo.reshape(x0.shape))) / (2.0 * eps)
        ana = analytic.reshape(-1)[i]
        worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    return worst
