"""Reverse-mode automatic differentiation over dense float64 tensors.

Graphs are built eagerly: every op computes its value at construction and
caches it on the node. Backpropagation emits *new graph nodes* rather than
raw arrays, so a gradient is itself differentiable; combined with
:func:`differentiable_sgd_step` this yields exact unrolled second-order
gradients through inner optimization steps. First-order behaviour is an
explicit :func:`detach` of the inner gradients.

Supported shapes are rank 0/1/2. Broadcasting is deliberately narrow:
scalar against anything, a [d] vector against the rows of [n, d], and an
[n, 1] column against [n, d].
"""

import itertools
import os
from collections.abc import Mapping, Sequence

import numpy as np

from .backend import kernels
from .errors import OpDomainError, ShapeError

_ids = itertools.count()

# Name of a primitive whose gradient is deliberately sign-flipped; used by
# the gradcheck mutation harness to prove the oracle catches wrong vjps.
_FAULT_OP = os.environ.get("METACONTRAST_GRADCHECK_FAULT")


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Node:
    """One value in a computation graph.

    ``parents`` are the operand nodes, ``value`` the cached float64 array,
    ``_vjp`` a closure mapping the incoming gradient node to one gradient
    node (or None) per parent.
    """

    __slots__ = ("id", "op", "parents", "value", "requires_grad", "_vjp")

    def __init__(self, op, parents, value, requires_grad, vjp=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    # small conveniences for tests and loss code
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def const(value, op="const") -> Node:
    """Leaf holding a fixed value; never receives gradient."""
    return Node(op, (), _as_value(value), False)


def variable(value, trainable=True) -> Node:
    """Leaf parameter node. Frozen variables get zero gradients."""
    return Node("variable", (), _as_value(value), bool(trainable))


def lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def forward(root: Node) -> np.ndarray:
    """Value at the root. Graphs evaluate eagerly, so this is a lookup."""
    return root.value


def detach(a: Node) -> Node:
    """Cut the graph: same value, no gradient flow."""
    return Node("detach", (), a.value, False)


def _node(op, parents, value, vjp):
    req = any(p.requires_grad for p in parents)
    return Node(op, parents, _as_value(value), req, vjp if req else None)


# ---------------------------------------------------------------------------
# binary elementwise ops with narrow broadcasting

_COMMUTATIVE = {"add", "mul"}


def _broadcast_mode(op, a, b):
    """Match operand shapes to a supported broadcast pattern.

    Returns (big, small, mode) with the full-shaped operand first; for
    commutative ops the operands may be swapped to achieve that.
    """
    sa, sb = a.shape, b.shape
    if sa == sb:
        return a, b, "same"
    if sb == ():
        return a, b, "bscalar"
    if sa == ():
        if op in _COMMUTATIVE:
            return b, a, "bscalar"
        return a, b, "ascalar"
    if len(sa) == 2 and sb == (sa[1],):
        return a, b, "row"
    if len(sa) == 2 and sb == (sa[0], 1):
        return a, b, "col"
    if op in _COMMUTATIVE:
        if len(sb) == 2 and sa == (sb[1],):
            return b, a, "row"
        if len(sb) == 2 and sa == (sb[0], 1):
            return b, a, "col"
    raise ShapeError(op, sa, sb)


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1)


def _ew_forward(op, a, b, mode):
    av, bv = a.value, b.value
    if mode == "same":
        fn = getattr(kernels, f"ew_{op}")
        return fn(_flat(av), _flat(bv)).reshape(av.shape)
    if mode == "bscalar":
        fn = {"add": kernels.adds, "sub": kernels.subs,
              "mul": kernels.muls, "div": kernels.divs}[op]
        return fn(_flat(av), float(bv)).reshape(av.shape)
    if mode == "ascalar":
        if op == "add":
            return kernels.adds(_flat(bv), float(av)).reshape(bv.shape)
        if op == "mul":
            return kernels.muls(_flat(bv), float(av)).reshape(bv.shape)
        if op == "sub":
            return kernels.ssub(float(av), _flat(bv)).reshape(bv.shape)
        return kernels.sdiv(float(av), _flat(bv)).reshape(bv.shape)
    fn = getattr(kernels, f"{op}_{mode}")
    return fn(av, bv)


def _reduce_small(g: Node, mode: str) -> Node:
    """Sum an incoming gradient over the axes the small operand was broadcast on."""
    if mode == "same":
        return g
    if mode in ("bscalar", "ascalar"):
        return sum_all(g)
    if mode == "row":
        return sum_axis0(g)
    return sum_axis1(g, keepdims=True)


def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    x, y, mode = _broadcast_mode("add", a, b)
    val = _ew_forward("add", x, y, mode)
    swapped = x is b and y is a and a is not b

    def vjp(g):
        gx = g
        gy = _reduce_small(g, mode)
        return (gy, gx) if swapped else (gx, gy)

    return _node("add", (a, b), val, vjp)


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    x, y, mode = _broadcast_mode("sub", a, b)
    val = _ew_forward("sub", x, y, mode)

    def vjp(g):
        if mode == "ascalar":  # scalar a minus full-shape b
            return sum_all(g), neg(g)
        return g, neg(_reduce_small(g, mode))

    return _node("sub", (a, b), val, vjp)


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    x, y, mode = _broadcast_mode("mul", a, b)
    val = _ew_forward("mul", x, y, mode)
    swapped = x is b and y is a and a is not b

    def vjp(g):
        gx = mul(g, y)
        gy = _reduce_small(mul(g, x), mode)
        return (gy, gx) if swapped else (gx, gy)

    return _node("mul", (a, b), val, vjp)


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    if float(np.min(np.abs(b.value))) == 0.0:
        raise OpDomainError("div", "division by zero")
    x, y, mode = _broadcast_mode("div", a, b)
    val = _ew_forward("div", x, y, mode)

    def vjp(g):
        if mode == "ascalar":  # scalar a over full-shape b
            ga = sum_all(div(g, b))
            gb = neg(div(mul(g, a), mul(b, b)))
            return ga, gb
        ga = div(g, b)
        t = div(mul(g, a), mul(b, b))
        return ga, neg(_reduce_small(t, mode))

    return _node("div", (a, b), val, vjp)


def scale(a: Node, s: float) -> Node:
    """Multiply by a python float constant."""
    return mul(a, const(float(s)))


# ---------------------------------------------------------------------------
# unary ops


def neg(a) -> Node:
    a = lift(a)
    val = kernels.neg(_flat(a.value)).reshape(a.shape)
    return _node("neg", (a,), val, lambda g: (neg(g),))


def exp(a) -> Node:
    a = lift(a)
    val = kernels.exp(_flat(a.value)).reshape(a.shape)
    out = _node("exp", (a,), val, None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Node:
    a = lift(a)
    if float(np.min(a.value)) <= 0.0:
        raise OpDomainError("log", "operand has non-positive entries")
    val = kernels.log(_flat(a.value)).reshape(a.shape)
    return _node("log", (a,), val, lambda g: (div(g, a),))


def tanh(a) -> Node:
    a = lift(a)
    val = kernels.tanh(_flat(a.value)).reshape(a.shape)
    out = _node("tanh", (a,), val, None)
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def relu(a) -> Node:
    a = lift(a)
    val = kernels.relu(_flat(a.value)).reshape(a.shape)
    mask = const(kernels.relu_mask(_flat(a.value)).reshape(a.shape), op="relu_mask")
    return _node("relu", (a,), val, lambda g: (mul(g, mask),))


def sqrt(a) -> Node:
    a = lift(a)
    if float(np.min(a.value)) < 0.0:
        raise OpDomainError("sqrt", "operand has negative entries")
    val = kernels.sqrt(_flat(a.value)).reshape(a.shape)
    out = _node("sqrt", (a,), val, None)
    if out.requires_grad:
        out._vjp = lambda g: (div(g, scale(out, 2.0)),)
    return out


def sq_diff(a, b) -> Node:
    """Elementwise (a - b)^2; operands must share a shape."""
    a, b = lift(a), lift(b)
    if a.shape != b.shape:
        raise ShapeError("sq_diff", a.shape, b.shape)
    val = kernels.sq_diff(_flat(a.value), _flat(b.value)).reshape(a.shape)

    def vjp(g):
        ga = mul(g, scale(sub(a, b), 2.0))
        return ga, neg(ga)

    return _node("sq_diff", (a, b), val, vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


def matmul(a, b) -> Node:
    a, b = lift(a), lift(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    val = kernels.matmul(a.value, b.value)

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node("matmul", (a, b), val, vjp)


def transpose(a) -> Node:
    a = lift(a)
    if len(a.shape) != 2:
        raise ShapeError("transpose", a.shape)
    val = kernels.transpose(a.value)
    return _node("transpose", (a,), val, lambda g: (transpose(g),))


def reshape(a, shape) -> Node:
    a = lift(a)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError("reshape", a.shape, shape)
    val = a.value.reshape(shape)
    old = a.shape
    return _node("reshape", (a,), val, lambda g: (reshape(g, old),))


def sum_axis0(a) -> Node:
    a = lift(a)
    if len(a.shape) != 2:
        raise ShapeError("sum_axis0", a.shape)
    n = a.shape[0]
    val = kernels.sum0(a.value)
    return _node("sum_axis0", (a,), val, lambda g: (tile_rows(g, n),))


def sum_axis1(a, keepdims=False) -> Node:
    a = lift(a)
    if len(a.shape) != 2:
        raise ShapeError("sum_axis1", a.shape)
    d = a.shape[1]
    val = kernels.sum1(a.value)
    if keepdims:
        val = val.reshape(-1, 1)

    def vjp(g):
        flat = reshape(g, (g.value.size,)) if len(g.shape) == 2 else g
        return (tile_cols(flat, d),)

    return _node("sum_axis1", (a,), val, vjp)


def sum_all(a) -> Node:
    a = lift(a)
    val = np.asarray(kernels.sum_all(_flat(a.value)))
    ones = const(np.ones(a.shape), op="ones")
    return _node("sum_all", (a,), val, lambda g: (mul(ones, g),))


def tile_rows(v, n: int) -> Node:
    v = lift(v)
    if len(v.shape) != 1:
        raise ShapeError("tile_rows", v.shape)
    val = kernels.tile_rows(v.value, n)
    return _node("tile_rows", (v,), val, lambda g: (sum_axis0(g),))


def tile_cols(c, d: int) -> Node:
    c = lift(c)
    if len(c.shape) != 1:
        raise ShapeError("tile_cols", c.shape)
    val = kernels.tile_cols(c.value, d)
    return _node("tile_cols", (c,), val, lambda g: (sum_axis1(g, keepdims=False),))


def gather_rows(table, idx) -> Node:
    """Select rows of a [r, d] table; gradient scatter-adds into the table."""
    table = lift(table)
    idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(-1))
    if len(table.shape) != 2:
        raise ShapeError("gather_rows", table.shape)
    r = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= r):
        raise OpDomainError("gather_rows", f"index out of range for table with {r} rows")
    val = kernels.gather_rows(table.value, idx)
    return _node("gather_rows", (table,), val,
                 lambda g: (scatter_add_rows(g, idx, r),))


def scatter_add_rows(g, idx, num_rows: int) -> Node:
    g = lift(g)
    idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64).reshape(-1))
    if len(g.shape) != 2 or idx.size != g.shape[0]:
        raise ShapeError("scatter_add_rows", g.shape, (idx.size,))
    val = kernels.scatter_add_rows(g.value, idx, num_rows)
    return _node("scatter_add_rows", (g,), val,
                 lambda gg: (gather_rows(gg, idx),))


# ---------------------------------------------------------------------------
# softmax family (row-wise, temperature-scaled, numerically stable)


def _rows(a: Node):
    if len(a.shape) == 1:
        return reshape(a, (1, a.shape[0])), True
    if len(a.shape) == 2:
        return a, False
    raise ShapeError("softmax", a.shape)


def log_softmax_t(a, temperature: float) -> Node:
    if temperature <= 0.0:
        raise OpDomainError("log_softmax_t", f"temperature must be > 0, got {temperature}")
    a = lift(a)
    a2, squeeze = _rows(a)
    val = kernels.log_softmax_t(a2.value, float(temperature))
    out = _node("log_softmax_t", (a2,), val, None)
    if out.requires_grad:
        def vjp(g):
            p = exp(out)
            rs = sum_axis1(g, keepdims=True)
            return (scale(sub(g, mul(p, rs)), 1.0 / temperature),)
        out._vjp = vjp
    return reshape(out, a.shape) if squeeze else out


def softmax_t(a, temperature: float) -> Node:
    if temperature <= 0.0:
        raise OpDomainError("softmax_t", f"temperature must be > 0, got {temperature}")
    a = lift(a)
    a2, squeeze = _rows(a)
    val = kernels.softmax_t(a2.value, float(temperature))
    out = _node("softmax_t", (a2,), val, None)
    if out.requires_grad:
        def vjp(g):
            rs = sum_axis1(mul(g, out), keepdims=True)
            return (scale(mul(out, sub(g, rs)), 1.0 / temperature),)
        out._vjp = vjp
    return reshape(out, a.shape) if squeeze else out


# ---------------------------------------------------------------------------
# composed helpers


def mean_axis0(a) -> Node:
    a = lift(a)
    return scale(sum_axis0(a), 1.0 / a.shape[0])


def mean_axis1(a, keepdims=False) -> Node:
    a = lift(a)
    return scale(sum_axis1(a, keepdims=keepdims), 1.0 / a.shape[1])


def mean_all(a) -> Node:
    a = lift(a)
    return scale(sum_all(a), 1.0 / a.value.size)


def l2_norm_rows(a, keepdims=True, eps=0.0) -> Node:
    """Euclidean norm along the last axis; rank-1 input behaves as one row."""
    a = lift(a)
    a2, squeeze = _rows(a)
    s = sum_axis1(mul(a2, a2), keepdims=keepdims)
    out = sqrt(add(s, const(float(eps)))) if eps else sqrt(s)
    return reshape(out, (1,) if keepdims else ()) if squeeze else out


NORMALIZE_EPS = 1e-12


def l2_normalize_rows(a, eps=NORMALIZE_EPS) -> Node:
    """Rows scaled to unit norm; eps keeps the zero row finite."""
    a = lift(a)
    a2, squeeze = _rows(a)
    out = div(a2, l2_norm_rows(a2, keepdims=True, eps=eps))
    return reshape(out, a.shape) if squeeze else out


# ---------------------------------------------------------------------------
# backpropagation


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, wrt: Sequence[Node]) -> list[Node]:
    """Gradients of a scalar root with respect to ``wrt`` nodes.

    Returned gradients are graph nodes (differentiating through them gives
    second-order terms). Nodes not on any path to the root, and frozen
    variables, get zero gradients.
    """
    if root.value.size != 1:
        raise ShapeError("backward", root.shape)
    grads: dict[int, Node] = {}
    if root.requires_grad:
        grads[root.id] = const(np.ones(root.shape), op="seed")
        for node in reversed(_toposort(root)):
            g = grads.get(node.id)
            if g is None or node._vjp is None:
                continue
            contribs = node._vjp(g)
            if node.op == _FAULT_OP:
                contribs = tuple(neg(c) if c is not None else None for c in contribs)
            for parent, c in zip(node.parents, contribs):
                if c is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = c if prev is None else add(prev, c)
    out = []
    for w in wrt:
        g = grads.get(w.id) if w.requires_grad else None
        out.append(g if g is not None else const(np.zeros(w.shape), op="zero_grad"))
    return out


# ---------------------------------------------------------------------------
# parameter collections


class ParamSet:
    """Named, ordered collection of float64 arrays with trainable flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._values[name] = _as_value(value)
        self._trainable[name] = bool(trainable)

    @classmethod
    def from_items(cls, items, trainable=None) -> "ParamSet":
        ps = cls()
        for name, value in items:
            flag = True if trainable is None else trainable.get(name, True)
            ps.add(name, value, flag)
        return ps

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_flags(self) -> dict[str, bool]:
        return dict(self._trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def copy(self) -> "ParamSet":
        ps = ParamSet()
        for name, value in self._values.items():
            ps.add(name, value.copy(), self._trainable[name])
        return ps

    def congruent(self, other: "ParamSet") -> bool:
        """Identical names, shapes and order."""
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape for n in self.names())

    def with_values(self, values: Mapping[str, np.ndarray]) -> "ParamSet":
        """Same names/flags/order, new values."""
        ps = ParamSet()
        for name in self._values:
            ps.add(name, _as_value(values[name]).copy(), self._trainable[name])
        return ps

    def bind(self) -> dict[str, Node]:
        """Leaf variable nodes for every entry, in order."""
        return {name: variable(value, trainable=self._trainable[name])
                for name, value in self._values.items()}


def param_grads(root: Node, leaves: Mapping[str, Node]) -> dict[str, np.ndarray]:
    """Numeric gradients of a scalar root for a bound parameter mapping."""
    names = list(leaves)
    gnodes = backward(root, [leaves[n] for n in names])
    return {n: g.value for n, g in zip(names, gnodes)}


def grad_paramset(root: Node, leaves: Mapping[str, Node], like: ParamSet) -> ParamSet:
    """Gradients packaged as a ParamSet congruent with ``like``."""
    grads = param_grads(root, leaves)
    return like.with_values(grads)


def _check_congruent_nodes(op, params, grads):
    if list(params) != list(grads):
        raise ShapeError(op, (len(params),), (len(grads),))
    for name in params:
        if params[name].shape != grads[name].shape:
            raise ShapeError(op, params[name].shape, grads[name].shape)


def differentiable_sgd_step(params: Mapping[str, Node],
                            grads: Mapping[str, Node],
                            lr: float,
                            detach_grads: bool = False) -> dict[str, Node]:
    """One gradient-descent update as new graph nodes: p' = p - lr * g.

    With ``detach_grads`` the gradients are treated as constants
    (first-order mode); otherwise a downstream loss differentiated through
    the result propagates into both p and the graph inside g. lr may be 0
    (the update degenerates to identity) but not negative.
    """
    if lr < 0.0:
        raise OpDomainError("sgd_step", f"learning rate must be >= 0, got {lr}")
    _check_congruent_nodes("sgd_step", params, grads)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if detach_grads:
            g = detach(g)
        out[name] = sub(p, scale(g, lr))
    return out
