"""Dynamics, control policies, and their compilation into bound graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .crown import BoundGraph, GraphError


# ---- dynamics -----------------------------------------------------------------


def unicycle_step(s, u):
    """One step of the unit-time unicycle; ``s = (x, y, heading)``, ``u = (v, omega)``."""
    x, y, th = s
    v, om = u
    return (x + v * math.cos(th), y + v * math.sin(th), th + om)


def quadrotor_step(s, u, dt=0.4, c_d=0.01, c_c=0.005):
    """Double-integrator quadrotor with quadratic drag and velocity coupling."""
    x, y, z, vx, vy, vz = s
    ax, ay, az = u
    fx = ax + c_c * vy * vz - c_d * vx * abs(vx)
    fy = ay + c_c * vz * vx - c_d * vy * abs(vy)
    fz = az + c_c * vx * vy - c_d * vz * abs(vz)
    h = dt * dt / 2.0
    return (
        x + vx * dt + fx * h,
        y + vy * dt + fy * h,
        z + vz * dt + fz * h,
        vx + fx * dt,
        vy + fy * dt,
        vz + fz * dt,
    )


class Unicycle:
    name = "unicycle"
    n_x = 3
    n_u = 2
    position_dims = (0, 1)
    velocity_dims = ()

    def step(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        """Batched step: ``X`` is ``(N, 3)``, ``U`` is ``(N, 2)``."""
        th, v, om = X[:, 2], U[:, 0], U[:, 1]
        return np.stack([X[:, 0] + v * np.cos(th), X[:, 1] + v * np.sin(th), th + om], axis=1)

    def build(self, g: BoundGraph, x: int, u: int) -> int:
        th = g.linear([(x, [[0.0, 0.0, 1.0]])])
        c = g.unary("cos", th)
        s = g.unary("sin", th)
        v = g.linear([(u, [[1.0, 0.0]])])
        # trig factor first: it rarely straddles zero, which keeps the planes tight
        vc = g.mul(c, v)
        vs = g.mul(s, v)
        return g.linear([
            (x, np.eye(3)),
            (vc, [[1.0], [0.0], [0.0]]),
            (vs, [[0.0], [1.0], [0.0]]),
            (u, [[0.0, 0.0], [0.0, 0.0], [0.0, 1.0]]),
        ])

    def to_dict(self) -> dict:
        return {"kind": self.name}


@dataclass
class Quadrotor:
    dt: float = 0.4
    c_d: float = 0.01
    c_c: float = 0.005

    name = "quadrotor"
    n_x = 6
    n_u = 3
    position_dims = (0, 1, 2)
    velocity_dims = (3, 4, 5)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    def forces(self, V: np.ndarray, U: np.ndarray) -> np.ndarray:
        vx, vy, vz = V[:, 0], V[:, 1], V[:, 2]
        coupling = np.stack([vy * vz, vz * vx, vx * vy], axis=1)
        return U + self.c_c * coupling - self.c_d * V * np.abs(V)

    def step(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        P, V = X[:, :3], X[:, 3:]
        F = self.forces(V, U)
        return np.concatenate([P + V * self.dt + F * (self.dt ** 2 / 2.0), V + F * self.dt], axis=1)

    def build(self, g: BoundGraph, x: int, u: int) -> int:
        def rows(idx):
            M = np.zeros((3, 6))
            M[range(3), idx] = 1.0
            return M

        a = g.linear([(x, rows([4, 5, 3]))])
        b = g.linear([(x, rows([5, 3, 4]))])
        coupling = g.mul(a, b)  # (vy*vz, vz*vx, vx*vy)
        drag = g.unary("signed_square", g.linear([(x, rows([3, 4, 5]))]))
        dt = self.dt
        I3 = np.eye(3)
        A = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3]])
        B = np.vstack([dt * dt / 2.0 * I3, dt * I3])
        return g.linear([(x, A), (u, B), (coupling, self.c_c * B), (drag, -self.c_d * B)])

    def to_dict(self) -> dict:
        return {"kind": self.name, "dt": self.dt, "c_d": self.c_d, "c_c": self.c_c}


# ---- policies -----------------------------------------------------------------


def _glorot_scale(n_in: int, n_out: int) -> float:
    return 0.1 * math.sqrt(6.0 / (n_in + n_out))


@dataclass
class MlpPolicy:
    """ReLU MLP; ``widths`` lists every layer size, input and output included."""

    widths: list[int]

    kind = "mlp"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"invalid layer widths {self.widths}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def shapes(self) -> dict[str, tuple]:
        out = {}
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            out[f"W{k}"] = (b, a)
            out[f"b{k}"] = (b,)
        return out

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        """Weights uniform in ``+-0.1*sqrt(6/(n_in+n_out))`` per layer, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for k, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            s = _glorot_scale(a, b)
            params[f"W{k}"] = rng.uniform(-s, s, size=(b, a))
            params[f"b{k}"] = np.zeros(b)
        return params

    def __call__(self, params: dict, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X)
        n = len(self.widths) - 1
        for k in range(n):
            h = h @ np.asarray(params[f"W{k}"]).T + np.asarray(params[f"b{k}"])
            if k < n - 1:
                h = np.maximum(h, 0.0)
        return h

    def build(self, g: BoundGraph, x: int) -> int:
        shapes = self.shapes()
        h = x
        n = len(self.widths) - 1
        for k in range(n):
            h = g.linear([(h, f"W{k}")], f"b{k}", shapes)
            if k < n - 1:
                h = g.unary("relu", h)
        return h

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden": self.widths[1:-1]}


@dataclass
class AffinePolicy:
    """``u = k^T x + b`` with gain ``k`` of shape ``(n_x, n_u)``."""

    n_in: int
    n_out: int

    kind = "affine"

    def shapes(self) -> dict[str, tuple]:
        return {"k": (self.n_in, self.n_out), "k^T": (self.n_out, self.n_in), "b": (self.n_out,)}

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        s = _glorot_scale(self.n_in, self.n_out)
        return {"k": rng.uniform(-s, s, size=(self.n_in, self.n_out)), "b": np.zeros(self.n_out)}

    def __call__(self, params: dict, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ np.asarray(params["k"]) + np.asarray(params["b"])

    def build(self, g: BoundGraph, x: int) -> int:
        return g.linear([(x, "k^T")], "b", self.shapes())

    def to_dict(self) -> dict:
        return {"kind": self.kind}


def init_params(policy, seed: int) -> dict[str, np.ndarray]:
    return policy.init_params(seed)


# ---- closed loop ----------------------------------------------------------------


@dataclass
class ClosedLoop:
    dynamics: object
    policy: object
    graph: BoundGraph = field(init=False, repr=False)

    def __post_init__(self):
        self.graph = compile_graph(self.dynamics, self.policy)

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    def step(self, params: dict, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.dynamics.step(X, self.policy(params, X))

    def simulate(self, params: dict, X0: np.ndarray, T: int) -> np.ndarray:
        """Exact trajectories, shape ``(N, T+1, n_x)``."""
        X = np.atleast_2d(np.asarray(X0, dtype=np.float64))
        out = [X]
        for _ in range(T):
            X = self.step(params, X)
            out.append(X)
        return np.stack(out, axis=1)


def compile_graph(dynamics, policy) -> BoundGraph:
    """Bound graph computing ``dynamics(x, policy(x))``."""
    if policy.n_in != dynamics.n_x:
        raise GraphError(f"policy input dim {policy.n_in} != state dim {dynamics.n_x}")
    if policy.n_out != dynamics.n_u:
        raise GraphError(f"policy output dim {policy.n_out} != control dim {dynamics.n_u}")
    g = BoundGraph(dynamics.n_x)
    u = policy.build(g, 0)
    dynamics.build(g, 0, u)
    return g
