"""Reverse-mode automatic differentiation on a linear tape of dense float64 arrays.

Every primitive is evaluated eagerly and appended to the :class:`Tape` that owns
its operands.  :meth:`Tape.backward` walks the tape in reverse and returns the
gradient of a scalar output with respect to every parameter registered on it.

Shape rules are strict: elementwise binary ops accept identical shapes, or a
0-d operand on either side (scalar ops).  Anything else must go through
:func:`broadcast_to` explicitly.

Subgradients at kinks: ``relu'(0) = 0``, ``abs'(0) = 0``, ``norm'(0) = 0`` and
``minimum``/``maximum``/``clip`` route the gradient to the first argument on ties.

Functions called with no :class:`Tensor` operand return plain numpy results, so
constant sub-expressions never land on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A tape produced a non-finite value."""


@dataclass
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


@dataclass
class TapeNode:
    op: str
    operands: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def _prim(name):
    def register(vjp):
        def deco(forward):
            PRIMITIVES[name] = Primitive(name, forward, vjp)
            return forward

        return deco

    return register


class Tensor:
    """Handle to one node of a tape."""

    __array_ufunc__ = None  # make ndarray (op) Tensor dispatch to our reflected ops
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))

    def item(self) -> float:
        return float(self.value)

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        op = self.tape.nodes[self.index].op
        return f"Tensor(op={op}, shape={self.shape}, value={self.value!r})"

    # arithmetic
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only integer power 2 is supported")
        return mul(self, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    # comparisons act on values and are not differentiable
    def __lt__(self, o):
        return self.value < _raw(o)

    def __le__(self, o):
        return self.value <= _raw(o)

    def __gt__(self, o):
        return self.value > _raw(o)

    def __ge__(self, o):
        return self.value >= _raw(o)

    __hash__ = object.__hash__


def _raw(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Tape:
    """A topologically ordered list of evaluated primitives."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.params: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _leaf(self, value, op: str, requires_grad: bool) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(TapeNode(op, (), arr, {}, requires_grad))
        return Tensor(self, len(self.nodes) - 1)

    def param(self, value) -> Tensor:
        t = self._leaf(value, "param", True)
        self.params.append(t)
        return t

    def const(self, value) -> Tensor:
        return self._leaf(value, "const", False)

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("operands belong to different tapes")
            return x
        return self.const(x)

    def record(self, op: str, operands, **attrs) -> Tensor:
        prim = PRIMITIVES[op]
        ops = [self.lift(o) for o in operands]
        vals = [o.value for o in ops]
        out = prim.forward(*vals, **attrs)
        out = np.asarray(out, dtype=np.float64)
        rg = any(self.nodes[o.index].requires_grad for o in ops)
        self.nodes.append(TapeNode(op, tuple(o.index for o in ops), out, attrs, rg))
        return Tensor(self, len(self.nodes) - 1)

    def backward(self, output: Tensor, wrt=None) -> dict[Tensor, np.ndarray]:
        """Gradient of scalar ``output`` w.r.t. each parameter (or each tensor in ``wrt``)."""
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if output.value.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        targets = self.params if wrt is None else list(wrt)
        grads: list[Any] = [None] * len(self.nodes)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or not node.operands:
                continue
            prim = PRIMITIVES[node.op]
            vals = [self.nodes[j].value for j in node.operands]
            parts = prim.vjp(g, node.value, *vals, **node.attrs)
            for j, gj in zip(node.operands, parts):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                if grads[j] is None:
                    grads[j] = np.array(gj, dtype=np.float64)
                else:
                    grads[j] = grads[j] + gj
        out = {}
        for t in targets:
            g = grads[t.index]
            out[t] = np.zeros_like(t.value) if g is None else g.reshape(t.shape)
        return out

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its operands; leaves keep their stored values."""
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if not node.operands:
                vals.append(node.value)
                continue
            prim = PRIMITIVES[node.op]
            out = prim.forward(*[vals[j] for j in node.operands], **node.attrs)
            vals.append(np.asarray(out, dtype=np.float64))
        return vals

    def first_nonfinite(self) -> TapeNode | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                return node
        return None

    def check_finite(self) -> None:
        bad = self.first_nonfinite()
        if bad is not None:
            raise NumericError(f"non-finite value produced by op '{bad.op}'")


def _tape_of(operands) -> Tape | None:
    tape = None
    for o in operands:
        if isinstance(o, Tensor):
            if tape is None:
                tape = o.tape
            elif o.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def record(op: str, operands, **attrs):
    """Apply primitive ``op``; returns a Tensor if any operand is one, else an ndarray."""
    tape = _tape_of(operands)
    if tape is None:
        prim = PRIMITIVES[op]
        vals = [np.asarray(o, dtype=np.float64) for o in operands]
        return np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
    return tape.record(op, operands, **attrs)


def value(x) -> np.ndarray:
    return _raw(x)


def _check_elementwise(op, a, b):
    sa, sb = np.shape(a), np.shape(b)
    if sa != sb and sa != () and sb != ():
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unscalar(g, shape):
    """Reduce a gradient back to a 0-d operand's shape."""
    if shape == () and np.shape(g) != ():
        return np.sum(g)
    return g


# ---- elementwise binary -------------------------------------------------------


def _binary(op, a, b):
    _check_elementwise(op, _raw(a), _raw(b))
    return record(op, (a, b))


@_prim("add")(lambda g, out, a, b: (_unscalar(g, a.shape), _unscalar(g, b.shape)))
def _add(a, b):
    return a + b


@_prim("sub")(lambda g, out, a, b: (_unscalar(g, a.shape), _unscalar(-g, b.shape)))
def _sub(a, b):
    return a - b


@_prim("mul")(lambda g, out, a, b: (_unscalar(g * b, a.shape), _unscalar(g * a, b.shape)))
def _mul(a, b):
    return a * b


@_prim("div")(
    lambda g, out, a, b: (_unscalar(g / b, a.shape), _unscalar(-g * a / (b * b), b.shape))
)
def _div(a, b):
    return a / b


@_prim("maximum")(
    lambda g, out, a, b: (
        _unscalar(np.where(a >= b, g, 0.0), a.shape),
        _unscalar(np.where(a >= b, 0.0, g), b.shape),
    )
)
def _maximum(a, b):
    return np.maximum(a, b)


@_prim("minimum")(
    lambda g, out, a, b: (
        _unscalar(np.where(a <= b, g, 0.0), a.shape),
        _unscalar(np.where(a <= b, 0.0, g), b.shape),
    )
)
def _minimum(a, b):
    return np.minimum(a, b)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def maximum(a, b):
    return _binary("maximum", a, b)


def minimum(a, b):
    return _binary("minimum", a, b)


# ---- elementwise unary --------------------------------------------------------


@_prim("neg")(lambda g, out, a: (-g,))
def _neg(a):
    return -a


@_prim("relu")(lambda g, out, a: (np.where(a > 0, g, 0.0),))
def _relu(a):
    return np.maximum(a, 0.0)


@_prim("abs")(lambda g, out, a: (g * np.sign(a),))
def _abs(a):
    return np.abs(a)


@_prim("signed_square")(lambda g, out, a: (g * 2.0 * np.abs(a),))
def _signed_square(a):
    return a * np.abs(a)


@_prim("sin")(lambda g, out, a: (g * np.cos(a),))
def _sin(a):
    return np.sin(a)


@_prim("cos")(lambda g, out, a: (-g * np.sin(a),))
def _cos(a):
    return np.cos(a)


@_prim("sqrt")(lambda g, out, a: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))
def _sqrt(a):
    return np.sqrt(a)


@_prim("clip")(lambda g, out, a, lo, hi: (np.where((a >= lo) & (a <= hi), g, 0.0), None, None))
def _clip(a, lo, hi):
    return np.minimum(np.maximum(a, lo), hi)


def neg(a):
    return record("neg", (a,))


def relu(a):
    return record("relu", (a,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    return record("abs", (a,))


def signed_square(a):
    return record("signed_square", (a,))


def sin(a):
    return record("sin", (a,))


def cos(a):
    return record("cos", (a,))


def sqrt(a):
    return record("sqrt", (a,))


def clip(a, lo, hi):
    """Clamp ``a`` to ``[lo, hi]``; the bounds are treated as constants."""
    _check_elementwise("clip", _raw(a), _raw(lo))
    _check_elementwise("clip", _raw(a), _raw(hi))
    return record("clip", (a, _raw(lo), _raw(hi)))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a non-differentiable mask."""
    cond = np.asarray(cond, dtype=bool)
    for name, x in (("a", a), ("b", b)):
        s = np.shape(_raw(x))
        if s != () and s != cond.shape:
            raise ShapeError(f"where: operand {name} shape {s} does not match condition {cond.shape}")
    return record("where", (a, b), cond=cond)


@_prim("where")(
    lambda g, out, a, b, cond: (
        _unscalar(np.where(cond, g, 0.0), a.shape),
        _unscalar(np.where(cond, 0.0, g), b.shape),
    )
)
def _where(a, b, cond):
    return np.where(cond, a, b)


# ---- reductions ---------------------------------------------------------------


def _expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


@_prim("sum")(lambda g, out, a, axis: (_expand(g, a.shape, axis),))
def _sum(a, axis):
    return np.sum(a, axis=axis)


def _prod_vjp(g, out, a, axis):
    # product of all other entries; exact also when some entries are zero
    if axis is None:
        flat = a.reshape(-1)
        n = flat.size
        left = np.concatenate([[1.0], np.cumprod(flat[:-1])]) if n else flat
        right = np.concatenate([np.cumprod(flat[::-1][:-1])[::-1], [1.0]]) if n else flat
        return ((g * left * right).reshape(a.shape),)
    moved = np.moveaxis(a, axis, -1)
    ones = np.ones(moved.shape[:-1] + (1,))
    left = np.concatenate([ones, np.cumprod(moved[..., :-1], axis=-1)], axis=-1)
    right = np.concatenate([np.cumprod(moved[..., :0:-1], axis=-1)[..., ::-1], ones], axis=-1)
    others = np.moveaxis(left * right, -1, axis)
    return (_expand(g, a.shape, axis) * others,)


@_prim("prod")(_prod_vjp)
def _prod(a, axis):
    return np.prod(a, axis=axis)


@_prim("norm")(
    lambda g, out, a: (g * a / out if out > 0 else np.zeros_like(a),)
)
def _norm(a):
    return np.sqrt(np.sum(a * a))


def sum(a, axis=None):  # noqa: A001
    return record("sum", (a,), axis=axis)


def prod(a, axis=None):
    return record("prod", (a,), axis=axis)


def norm(a):
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    return record("norm", (a,))


# ---- linear algebra and structure ---------------------------------------------


def _matmul_vjp(g, out, a, b):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


@_prim("matmul")(_matmul_vjp)
def _matmul(a, b):
    return a @ b


def matmul(a, b):
    sa, sb = np.shape(_raw(a)), np.shape(_raw(b))
    if not (1 <= len(sa) <= 2 and 1 <= len(sb) <= 2) or sa[-1] != sb[0]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    return record("matmul", (a, b))


@_prim("transpose")(lambda g, out, a: (g.T,))
def _transpose(a):
    return a.T


def transpose(a):
    if np.ndim(_raw(a)) != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {np.shape(_raw(a))}")
    return record("transpose", (a,))


def _getitem_vjp(g, out, a, idx):
    ga = np.zeros_like(a)
    np.add.at(ga, idx, g)
    return (ga,)


@_prim("getitem")(_getitem_vjp)
def _getitem(a, idx):
    return a[idx]


def getitem(a, idx):
    return record("getitem", (a,), idx=idx)


@_prim("reshape")(lambda g, out, a, shape: (g.reshape(a.shape),))
def _reshape(a, shape):
    return a.reshape(shape)


def reshape(a, shape):
    return record("reshape", (a,), shape=tuple(shape))


def _sum_to(g, shape):
    extra = g.ndim - len(shape)
    g = np.sum(g, axis=tuple(range(extra))) if extra else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return np.sum(g, axis=axes, keepdims=True) if axes else g


@_prim("broadcast_to")(lambda g, out, a, shape: (_sum_to(g, a.shape),))
def _broadcast_to(a, shape):
    return np.array(np.broadcast_to(a, shape))


def broadcast_to(a, shape):
    try:
        np.broadcast_shapes(np.shape(_raw(a)), tuple(shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {np.shape(_raw(a))} to {tuple(shape)}") from None
    return record("broadcast_to", (a,), shape=tuple(shape))


def _split_vjp(g, sizes, axis):
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


@_prim("concatenate")(lambda g, out, *parts, axis: _split_vjp(g, [p.shape[axis] for p in parts], axis))
def _concatenate(*parts, axis):
    return np.concatenate(parts, axis=axis)


@_prim("stack")(lambda g, out, *parts, axis: tuple(np.moveaxis(g, axis, 0)))
def _stack(*parts, axis):
    return np.stack(parts, axis=axis)


def concatenate(parts, axis=0):
    shapes = [np.shape(_raw(p)) for p in parts]
    try:
        np.concatenate([np.empty(s) for s in shapes], axis=axis)
    except ValueError:
        raise ShapeError(f"concatenate: incompatible shapes {shapes}") from None
    return record("concatenate", tuple(parts), axis=axis)


def stack(parts, axis=0):
    shapes = {np.shape(_raw(p)) for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {sorted(shapes)}")
    return record("stack", tuple(parts), axis=axis)
