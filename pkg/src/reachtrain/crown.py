"""Backward linear bound propagation (CROWN) over closed-loop step graphs.

A :class:`BoundGraph` is a topologically ordered list of primitive nodes whose
node 0 is the state input.  :func:`step_bounds` returns a hyperrectangle that
contains the image of an input box under the graph; :func:`rollout_bounds`
iterates it over a horizon, concretizing at every step.

The bound code only uses functions from an array namespace ``xp``, so the result
is differentiable with respect to the graph parameters on the diffcore and jax
backends, including the dependence of relaxation slopes on intermediate bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from . import relax
from .backend import NUMPY

EPS_SOUND = 1e-9

Weight = Union[str, np.ndarray]


class GraphError(ValueError):
    pass


class BoundError(FloatingPointError):
    """Bounds came out inverted or non-finite."""


@dataclass
class HyperRect:
    lo: Any
    hi: Any

    def __post_init__(self):
        if isinstance(self.lo, (list, tuple, float, int)):
            self.lo = np.asarray(self.lo, dtype=np.float64)
        if isinstance(self.hi, (list, tuple, float, int)):
            self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.shape(self.lo) != np.shape(self.hi):
            raise ValueError(f"lo/hi shape mismatch: {np.shape(self.lo)} vs {np.shape(self.hi)}")
        if isinstance(self.lo, np.ndarray) and isinstance(self.hi, np.ndarray):
            if np.any(self.lo > self.hi):
                raise ValueError(f"inverted box: lo={self.lo}, hi={self.hi}")

    @classmethod
    def from_bounds(cls, bounds) -> "HyperRect":
        arr = np.asarray(bounds, dtype=np.float64)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())

    @classmethod
    def around(cls, center, radius) -> "HyperRect":
        c = np.asarray(center, dtype=np.float64)
        return cls(c - radius, c + radius)

    @property
    def dim(self) -> int:
        return int(np.shape(self.lo)[0])

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self):
        return self.hi - self.lo

    def volume(self) -> float:
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))

    def numpy(self) -> "HyperRect":
        from .backend import DIFFCORE

        return HyperRect(np.array(DIFFCORE.raw(self.lo)), np.array(DIFFCORE.raw(self.hi)))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= np.asarray(self.lo) - tol) and np.all(x <= np.asarray(self.hi) + tol))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + (hi - lo) * rng.random((n, lo.size))


@dataclass
class AffineBounds:
    """``A_lo @ x + b_lo <= g(x) <= A_up @ x + b_up`` over some input box."""

    A_lo: Any
    b_lo: Any
    A_up: Any
    b_up: Any


@dataclass
class ReachTube:
    """Stacked bounds ``lo[t], hi[t]`` for ``t = 0..T``."""

    lo: Any
    hi: Any

    @property
    def T(self) -> int:
        return int(np.shape(self.lo)[0]) - 1

    def __len__(self) -> int:
        return self.T + 1

    def rect(self, t: int) -> HyperRect:
        return HyperRect(self.lo[t], self.hi[t])

    @property
    def rects(self) -> list[HyperRect]:
        return [self.rect(t) for t in range(self.T + 1)]

    def numpy(self) -> "ReachTube":
        from .backend import DIFFCORE

        return ReachTube(np.array(DIFFCORE.raw(self.lo)), np.array(DIFFCORE.raw(self.hi)))


# ---- graph --------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    """``y = sum_k W_k @ z_k + b`` over one or more earlier nodes."""

    terms: tuple
    bias: Any
    dim: int
    kind: str = "affine"


@dataclass(frozen=True)
class Unary:
    kind: str
    input: int
    dim: int


@dataclass(frozen=True)
class Mul:
    """Elementwise product of two earlier nodes of equal dimension."""

    left: int
    right: int
    dim: int
    kind: str = "bilinear"


@dataclass
class BoundGraph:
    n_in: int
    nodes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            self.nodes.append(None)  # node 0: the input

    @property
    def output(self) -> int:
        return len(self.nodes) - 1

    @property
    def n_out(self) -> int:
        return self.dim(self.output)

    def dim(self, i: int) -> int:
        return self.n_in if i == 0 else self.nodes[i].dim

    def _check_ref(self, i: int):
        if not 0 <= i < len(self.nodes):
            raise GraphError(f"node reference {i} is not an earlier node (have {len(self.nodes)})")

    def linear(self, terms, bias=None, shapes: dict | None = None) -> int:
        """Append a linear node.  ``terms`` is a list of ``(node, weight)``.

        A weight is a constant matrix or the name of a parameter; named weights
        need their shape in ``shapes``.
        """
        shapes = shapes or {}
        dim = None
        checked = []
        for i, w in terms:
            self._check_ref(i)
            shp = shapes[w] if isinstance(w, str) else np.shape(w)
            if len(shp) != 2 or shp[1] != self.dim(i):
                raise GraphError(f"weight of shape {shp} cannot multiply node {i} of dim {self.dim(i)}")
            if dim is not None and shp[0] != dim:
                raise GraphError(f"linear terms disagree on output dim: {shp[0]} vs {dim}")
            dim = shp[0]
            checked.append((i, w if isinstance(w, str) else np.asarray(w, dtype=np.float64)))
        if bias is not None and not isinstance(bias, str):
            bias = np.asarray(bias, dtype=np.float64)
            if bias.shape != (dim,):
                raise GraphError(f"bias shape {bias.shape} does not match output dim {dim}")
        self.nodes.append(Linear(tuple(checked), bias, dim))
        return self.output

    def unary(self, kind: str, i: int) -> int:
        if kind not in relax.UNARY_RELAXATIONS:
            raise GraphError(f"unsupported unary primitive {kind!r}")
        self._check_ref(i)
        self.nodes.append(Unary(kind, i, self.dim(i)))
        return self.output

    def mul(self, a: int, b: int) -> int:
        self._check_ref(a)
        self._check_ref(b)
        if self.dim(a) != self.dim(b):
            raise GraphError(f"bilinear operands differ in dim: {self.dim(a)} vs {self.dim(b)}")
        self.nodes.append(Mul(a, b, self.dim(a)))
        return self.output

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes[1:]]

    def forward(self, params: dict, x, xp=NUMPY):
        """Concrete evaluation at a single state ``x``."""
        vals = [x]
        for node in self.nodes[1:]:
            if isinstance(node, Linear):
                y = None
                for i, w in node.terms:
                    t = _w(params, w) @ vals[i]
                    y = t if y is None else y + t
                if node.bias is not None:
                    y = y + _w(params, node.bias)
            elif isinstance(node, Unary):
                z = vals[node.input]
                y = {"relu": xp.relu, "sin": xp.sin, "cos": xp.cos,
                     "signed_square": xp.signed_square}[node.kind](z)
            else:
                y = vals[node.left] * vals[node.right]
            vals.append(y)
        return vals[-1]


def _w(params: dict, w):
    if isinstance(w, str):
        try:
            if w.endswith("^T"):
                return params[w[:-2]].T
            return params[w]
        except KeyError:
            raise GraphError(f"missing parameter {w!r}") from None
    return w


# ---- bound propagation ---------------------------------------------------------


@dataclass(frozen=True)
class BoundOptions:
    """``intermediate`` is ``"crown"`` (backward to every nonlinear input) or ``"ibp"``.

    ``slope_gradients=False`` treats relaxation coefficients as constants for the
    gradient.  ``bilinear_alternative`` selects the ``xhi``-anchored plane pair.
    ``intersect_ibp`` clips back-substituted bounds to the forward interval
    bounds; plain back-substitution can be looser than interval arithmetic.
    """

    mode: str = "crown"
    intermediate: str = "crown"
    eps: float = EPS_SOUND
    slope_gradients: bool = True
    bilinear_alternative: bool = False
    intersect_ibp: bool = True

    def __post_init__(self):
        if self.mode not in ("crown", "ibp"):
            raise ValueError(f"mode must be 'crown' or 'ibp', got {self.mode!r}")
        if self.intermediate not in ("crown", "ibp"):
            raise ValueError(f"intermediate must be 'crown' or 'ibp', got {self.intermediate!r}")


DEFAULT_OPTIONS = BoundOptions()


def concretize(ab: AffineBounds, box: HyperRect, xp=NUMPY, eps: float = EPS_SOUND) -> HyperRect:
    """Worst case of the affine bounds over ``box`` via sign splitting, widened by ``eps``."""
    n = np.shape(box.lo)[0]
    for A in (ab.A_lo, ab.A_up):
        if np.ndim(A) != 2 or np.shape(A)[1] != n:
            raise ValueError(f"affine bounds of shape {np.shape(A)} do not match input dim {n}")
    Up, Un = xp.maximum(ab.A_up, 0.0), xp.minimum(ab.A_up, 0.0)
    Lp, Ln = xp.maximum(ab.A_lo, 0.0), xp.minimum(ab.A_lo, 0.0)
    hi = Up @ box.hi + Un @ box.lo + ab.b_up + eps
    lo = Lp @ box.lo + Ln @ box.hi + ab.b_lo - eps
    return HyperRect(lo, hi)


def _rows(v, shape, xp):
    return xp.broadcast_to(v, shape)


def _acc(store: dict, i: int, val):
    store[i] = val if i not in store else store[i] + val


class _Propagator:
    """Holds per-step state: node bounds and cached relaxations."""

    def __init__(self, graph: BoundGraph, params: dict, box: HyperRect, opts: BoundOptions, xp):
        self.g = graph
        self.params = params
        self.box = box
        self.opts = opts
        self.xp = xp
        self.bounds: dict[int, tuple] = {0: (box.lo, box.hi)}
        self.relax: dict[int, Any] = {}

    def _coef(self, c):
        return c if self.opts.slope_gradients else self.xp.stop_gradient(c)

    def relaxation(self, j: int):
        if j not in self.relax:
            node = self.g.nodes[j]
            xp = self.xp
            if isinstance(node, Unary):
                lo, hi = self.bounds[node.input]
                r = relax.UNARY_RELAXATIONS[node.kind](lo, hi, xp)
                r = relax.LinearRelaxation(*(self._coef(c) for c in
                                             (r.slope_lo, r.intercept_lo, r.slope_up, r.intercept_up)))
            else:
                xl, xh = self.bounds[node.left]
                yl, yh = self.bounds[node.right]
                r = relax.bilinear_relax(xl, xh, yl, yh, self.opts.bilinear_alternative)
                r = relax.BilinearRelaxation(*(self._coef(c) for c in
                                               (r.lo_x, r.lo_y, r.lo_c, r.up_x, r.up_y, r.up_c)))
            self.relax[j] = r
        return self.relax[j]

    def backward(self, target: int) -> AffineBounds:
        xp, g = self.xp, self.g
        m = g.dim(target)
        eye = np.eye(m)
        U: dict[int, Any] = {target: eye}
        L: dict[int, Any] = {target: eye}
        bu = np.zeros(m)
        bl = np.zeros(m)
        for j in range(target, 0, -1):
            if j not in U:
                continue
            Uj, Lj = U.pop(j), L.pop(j)
            node = g.nodes[j]
            if isinstance(node, Linear):
                for i, w in node.terms:
                    W = _w(self.params, w)
                    _acc(U, i, Uj @ W)
                    _acc(L, i, Lj @ W)
                if node.bias is not None:
                    b = _w(self.params, node.bias)
                    bu = bu + Uj @ b
                    bl = bl + Lj @ b
                continue
            shape = (m, node.dim)
            Up, Un = xp.maximum(Uj, 0.0), xp.minimum(Uj, 0.0)
            Lp, Ln = xp.maximum(Lj, 0.0), xp.minimum(Lj, 0.0)
            r = self.relaxation(j)
            if isinstance(node, Unary):
                su, sl = _rows(r.slope_up, shape, xp), _rows(r.slope_lo, shape, xp)
                _acc(U, node.input, Up * su + Un * sl)
                _acc(L, node.input, Lp * sl + Ln * su)
                bu = bu + Up @ r.intercept_up + Un @ r.intercept_lo
                bl = bl + Lp @ r.intercept_lo + Ln @ r.intercept_up
            else:
                ux, lx = _rows(r.up_x, shape, xp), _rows(r.lo_x, shape, xp)
                uy, ly = _rows(r.up_y, shape, xp), _rows(r.lo_y, shape, xp)
                _acc(U, node.left, Up * ux + Un * lx)
                _acc(U, node.right, Up * uy + Un * ly)
                _acc(L, node.left, Lp * lx + Ln * ux)
                _acc(L, node.right, Lp * ly + Ln * uy)
                bu = bu + Up @ r.up_c + Un @ r.lo_c
                bl = bl + Lp @ r.lo_c + Ln @ r.up_c
        A_up = U.get(0, np.zeros((m, g.n_in)))
        A_lo = L.get(0, np.zeros((m, g.n_in)))
        return AffineBounds(A_lo, bl, A_up, bu)

    def ibp_node(self, j: int, bounds: dict = None) -> tuple:
        """Forward interval bounds of node ``j`` from the current bounds of its inputs."""
        xp, node = self.xp, self.g.nodes[j]
        bounds = self.bounds if bounds is None else bounds
        if isinstance(node, Linear):
            lo = hi = None
            for i, w in node.terms:
                a, b = relax.iv_matmul(_w(self.params, w), *bounds[i], xp)
                lo = a if lo is None else lo + a
                hi = b if hi is None else hi + b
            if node.bias is not None:
                bias = _w(self.params, node.bias)
                lo, hi = lo + bias, hi + bias
            return lo, hi
        if isinstance(node, Unary):
            return relax.UNARY_INTERVALS[node.kind](*bounds[node.input], xp)
        return relax.iv_mul(*bounds[node.left], *bounds[node.right], xp)

    def ibp_all(self, bounds: dict = None) -> dict:
        bounds = self.bounds if bounds is None else bounds
        for j in range(1, len(self.g.nodes)):
            if j not in bounds:
                bounds[j] = self.ibp_node(j, bounds)
        return bounds

    def _needed(self) -> set:
        """Nodes whose bounds feed a relaxation, plus the output."""
        need = {self.g.output}
        if self.opts.intermediate == "crown":
            for node in self.g.nodes[1:]:
                if isinstance(node, Unary):
                    need.add(node.input)
                elif isinstance(node, Mul):
                    need.update((node.left, node.right))
        return need

    def crown_all(self, upto: int):
        """Bounds for every node before ``upto`` (and ``upto`` itself if it is needed).

        Nodes feeding a relaxation get back-substituted bounds; with
        ``intersect_ibp`` every node also gets forward interval bounds and the
        two are intersected, both being valid enclosures. Needed nodes are
        further clipped to a plain interval pass from the input box, so the
        padding cannot accumulate past what interval mode reports.
        """
        need = self._needed()
        xp = self.xp
        pure = self.ibp_all({0: self.bounds[0]}) if self.opts.intersect_ibp else None
        for j in range(1, upto + 1):
            if j in self.bounds:
                continue
            iv = self.ibp_node(j) if self.opts.intersect_ibp else None
            if j in need:
                r = concretize(self.backward(j), self.box, xp, self.opts.eps)
                lo, hi = r.lo, r.hi
                if iv is not None:
                    # the interval bounds get the same outward padding as concretize
                    eps = self.opts.eps
                    lo = xp.maximum(xp.maximum(lo, iv[0] - eps), pure[j][0] - eps)
                    hi = xp.minimum(xp.minimum(hi, iv[1] + eps), pure[j][1] + eps)
                self.bounds[j] = (lo, hi)
            elif iv is not None:
                self.bounds[j] = iv
            elif self.opts.intermediate == "ibp":
                self.bounds[j] = self.ibp_node(j)

    def run(self) -> HyperRect:
        if self.opts.mode == "ibp":
            self.ibp_all()
            lo, hi = self.bounds[self.g.output]
            return HyperRect(lo - self.opts.eps, hi + self.opts.eps)
        self.crown_all(self.g.output)
        lo, hi = self.bounds[self.g.output]
        return HyperRect(lo, hi)


def affine_bounds(graph: BoundGraph, params: dict, box: HyperRect, opts: BoundOptions = DEFAULT_OPTIONS,
                  xp=NUMPY) -> AffineBounds:
    """Output affine bounds of ``graph`` in terms of its input over ``box``."""
    p = _Propagator(graph, params, box, opts, xp)
    p.crown_all(graph.output - 1)
    return p.backward(graph.output)


def _validate(graph: BoundGraph, box: HyperRect):
    if box.dim != graph.n_in:
        raise GraphError(f"input box has dim {box.dim}, graph expects {graph.n_in}")
    if graph.output == 0:
        raise GraphError("graph has no nodes")


def check_rect(rect: HyperRect, where: str = "") -> None:
    lo, hi = np.asarray(rect.lo), np.asarray(rect.hi)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BoundError(f"non-finite bounds{where}: lo={lo}, hi={hi}")
    bad = np.nonzero(lo > hi)[0]
    if bad.size:
        raise BoundError(f"inverted bounds{where} in dims {bad.tolist()}: lo={lo[bad]}, hi={hi[bad]}")


def step_bounds(graph: BoundGraph, params: dict, box: HyperRect, opts: BoundOptions = DEFAULT_OPTIONS,
                xp=NUMPY) -> HyperRect:
    """Box containing ``{graph(x) : x in box}``."""
    _validate(graph, box)
    out = _Propagator(graph, params, box, opts, xp).run()
    if xp.name != "jax":
        check_rect(_raw_rect(out, xp), " after step")
    return out


def _raw_rect(rect: HyperRect, xp) -> HyperRect:
    r = HyperRect.__new__(HyperRect)
    r.lo, r.hi = np.asarray(xp.raw(rect.lo)), np.asarray(xp.raw(rect.hi))
    return r


def ibp_step(graph: BoundGraph, params: dict, box: HyperRect, xp=NUMPY) -> HyperRect:
    return step_bounds(graph, params, box, BoundOptions(mode="ibp"), xp)


def rollout_bounds(graph: BoundGraph, params: dict, X0: HyperRect, T: int,
                   opts: BoundOptions = DEFAULT_OPTIONS, xp=NUMPY) -> ReachTube:
    """Reach tube with ``R_0 = X0`` and ``R_{t+1} = step_bounds(R_t)``."""
    if T < 1:
        raise ValueError(f"horizon must be >= 1, got {T}")
    _validate(graph, X0)
    if xp.name == "jax":
        return _rollout_scan(graph, params, X0, T, opts, xp)
    los, his = [xp.asarray(X0.lo)], [xp.asarray(X0.hi)]
    box = HyperRect(X0.lo, X0.hi)
    for t in range(T):
        box = _Propagator(graph, params, box, opts, xp).run()
        check_rect(_raw_rect(box, xp), f" at step {t + 1}")
        los.append(box.lo)
        his.append(box.hi)
    return ReachTube(xp.stack(los), xp.stack(his))


def _rollout_scan(graph, params, X0, T, opts, xp):
    jnp = xp.jnp

    def body(carry, _):
        lo, hi = carry
        r = _Propagator(graph, params, HyperRect(lo, hi), opts, xp).run()
        return (r.lo, r.hi), (r.lo, r.hi)

    lo0, hi0 = jnp.asarray(X0.lo), jnp.asarray(X0.hi)
    _, (los, his) = xp.jax.lax.scan(body, (lo0, hi0), None, length=T)
    return ReachTube(jnp.concatenate([lo0[None], los]), jnp.concatenate([hi0[None], his]))
