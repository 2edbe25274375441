"""Array namespaces the bound and loss code is written against.

Three interchangeable backends expose the same small function set:

* ``NUMPY``: plain float64 evaluation, no gradients (oracles, certification).
* ``DIFFCORE``: records onto a :class:`reachtrain.diffcore.Tape`.
* ``JAX``: ``jax.numpy`` in float64, meant to be traced under ``jax.jit``.

All three share one subgradient convention (ties go to the first argument of
``maximum``/``minimum``, zero derivative of ``relu``/``abs``/``norm`` at 0).
Elementwise operands must have identical shapes or be scalars; use
``broadcast_to`` otherwise.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc


class NumpyBackend:
    name = "numpy"

    @staticmethod
    def raw(x):
        return np.asarray(x, dtype=np.float64)

    asarray = raw

    @staticmethod
    def zeros(shape):
        return np.zeros(shape)

    @staticmethod
    def eye(n):
        return np.eye(n)

    where = staticmethod(np.where)
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    abs = staticmethod(np.abs)
    sqrt = staticmethod(np.sqrt)
    floor = staticmethod(np.floor)
    ceil = staticmethod(np.ceil)
    logical_and = staticmethod(np.logical_and)
    logical_or = staticmethod(np.logical_or)
    logical_not = staticmethod(np.logical_not)
    broadcast_to = staticmethod(np.broadcast_to)

    @staticmethod
    def stop_gradient(x):
        return x

    @staticmethod
    def maximum(a, b):
        return np.maximum(a, b)

    @staticmethod
    def minimum(a, b):
        return np.minimum(a, b)

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def signed_square(x):
        return x * np.abs(x)

    @staticmethod
    def clip(x, lo, hi):
        return np.minimum(np.maximum(x, lo), hi)

    @staticmethod
    def sum(x, axis=None):
        return np.sum(x, axis=axis)

    @staticmethod
    def prod(x, axis=None):
        return np.prod(x, axis=axis)

    @staticmethod
    def norm(x):
        return np.sqrt(np.sum(x * x))

    @staticmethod
    def concatenate(parts, axis=0):
        return np.concatenate(parts, axis=axis)

    @staticmethod
    def stack(parts, axis=0):
        return np.stack(parts, axis=axis)


class BranchRecorder(NumpyBackend):
    """Numpy backend that logs every case-switch mask it evaluates.

    Two evaluations with equal logs took the same branch everywhere, which is how
    finite-difference checks detect that a perturbation crossed a kink.
    """

    name = "numpy-recording"

    def __init__(self):
        self.log: list[np.ndarray] = []

    def _keep(self, mask):
        self.log.append(np.array(mask, dtype=bool))

    def where(self, cond, a, b):
        self._keep(cond)
        return np.where(cond, a, b)

    def maximum(self, a, b):
        self._keep(np.asarray(a) >= np.asarray(b))
        return np.maximum(a, b)

    def minimum(self, a, b):
        self._keep(np.asarray(a) <= np.asarray(b))
        return np.minimum(a, b)

    def relu(self, x):
        self._keep(x > 0)
        return np.maximum(x, 0.0)

    def abs(self, x):
        self._keep(x >= 0)
        return np.abs(x)

    def signed_square(self, x):
        self._keep(x >= 0)
        return x * np.abs(x)

    def clip(self, x, lo, hi):
        self._keep(x >= lo)
        self._keep(x <= hi)
        return np.minimum(np.maximum(x, lo), hi)

    def norm(self, x):
        self._keep(np.sum(x * x) > 0)
        return np.sqrt(np.sum(x * x))


class DiffcoreBackend:
    name = "diffcore"

    raw = staticmethod(dc.value)

    @staticmethod
    def asarray(x):
        return x if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)

    zeros = staticmethod(np.zeros)
    eye = staticmethod(np.eye)
    floor = staticmethod(np.floor)
    ceil = staticmethod(np.ceil)
    logical_and = staticmethod(np.logical_and)
    logical_or = staticmethod(np.logical_or)
    logical_not = staticmethod(np.logical_not)

    where = staticmethod(dc.where)
    sin = staticmethod(dc.sin)
    cos = staticmethod(dc.cos)
    abs = staticmethod(dc.abs)
    sqrt = staticmethod(dc.sqrt)
    maximum = staticmethod(dc.maximum)
    minimum = staticmethod(dc.minimum)
    relu = staticmethod(dc.relu)
    signed_square = staticmethod(dc.signed_square)
    clip = staticmethod(dc.clip)
    sum = staticmethod(dc.sum)
    prod = staticmethod(dc.prod)
    norm = staticmethod(dc.norm)
    concatenate = staticmethod(dc.concatenate)
    stack = staticmethod(dc.stack)
    broadcast_to = staticmethod(dc.broadcast_to)

    @staticmethod
    def stop_gradient(x):
        return dc.value(x).copy() if isinstance(x, dc.Tensor) else x


class JaxBackend:
    name = "jax"

    def __init__(self):
        import jax

        jax.config.update("jax_enable_x64", True)
        import jax.numpy as jnp

        self.jax = jax
        self.jnp = jnp
        for fn in ("sin", "cos", "floor", "ceil", "logical_and", "logical_or", "logical_not",
                   "concatenate", "stack", "broadcast_to", "zeros", "eye", "abs"):
            setattr(self, fn, getattr(jnp, fn))

    def raw(self, x):
        return self.jnp.asarray(x, dtype=self.jnp.float64)

    def stop_gradient(self, x):
        return self.jax.lax.stop_gradient(x)

    asarray = raw

    def where(self, cond, a, b):
        return self.jnp.where(cond, a, b)

    def maximum(self, a, b):
        return self.jnp.where(a >= b, a, b)

    def minimum(self, a, b):
        return self.jnp.where(a <= b, a, b)

    def relu(self, x):
        return self.jnp.where(x > 0, x, 0.0)

    def signed_square(self, x):
        return x * self.jnp.abs(x)

    def clip(self, x, lo, hi):
        return self.minimum(self.maximum(x, lo), hi)

    def sum(self, x, axis=None):
        return self.jnp.sum(x, axis=axis)

    def prod(self, x, axis=None):
        return self.jnp.prod(x, axis=axis)

    def sqrt(self, x):
        pos = x > 0
        return self.jnp.where(pos, self.jnp.sqrt(self.jnp.where(pos, x, 1.0)), 0.0)

    def norm(self, x):
        return self.sqrt(self.jnp.sum(x * x))


NUMPY = NumpyBackend()
DIFFCORE = DiffcoreBackend()
_JAX: JaxBackend | None = None


def jax_backend() -> JaxBackend:
    global _JAX
    if _JAX is None:
        _JAX = JaxBackend()
    return _JAX


def get(name: str):
    if name == "numpy":
        return NUMPY
    if name == "diffcore":
        return DIFFCORE
    if name == "jax":
        return jax_backend()
    raise ValueError(f"unknown backend {name!r}")
