"""Scenario files: a YAML mapping describing one training/verification problem.

Schema (all keys required unless marked optional)::

    name: str
    dynamics: {kind: unicycle} | {kind: quadrotor, dt?, c_d?, c_c?}
    policy: {kind: mlp, hidden: [int, ...]} | {kind: affine}
    initial_set: [[lo, hi], ...]          # one pair per state dim
    horizon: int                          # T >= 1
    goal: {center: [...], half_width?: float = 0.5}   # positional dims
    obstacles?:
      boxes?: [{center: [...], half_width?: 0.5}, ...]
      spheres?: [{center: [...], radius: float, margin?: 1.0}, ...]
    weights?: {w_goal, w_overlap_goal, w_overlap_obs, w_vol, w_inv, w_vel,
               w_obs_entry, w_obs_prox, t_inv, vol_normalized}
    train?: {lr, epochs, seed, plateau_window, plateau_tol, early_stop_on_cert,
             checkpoint_every, cert_every}
    bounds?: {mode: crown|ibp, intermediate: crown|ibp, slope_gradients: bool,
              bilinear_alternative: bool, intersect_ibp: bool}
    certify?: {require_goal: bool, require_invariance: bool}

Weights are raw signed numbers; the goal-overlap weight is subtracted in the
total loss (see :func:`reachtrain.losses.total_loss`).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .crown import BoundOptions, HyperRect
from .losses import BoxRegion, LossWeights, SphereObstacle
from .models import AffinePolicy, ClosedLoop, MlpPolicy, Quadrotor, Unicycle


class ScenarioError(ValueError):
    """Schema violation; ``problems`` holds ``(field path, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20000
    seed: int = 0
    plateau_window: int = 500
    plateau_tol: float = 1e-5
    early_stop_on_cert: bool = False
    checkpoint_every: int = 1000
    cert_every: int = 100

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class CertifyConfig:
    require_goal: bool = True
    require_invariance: bool = False

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Scenario:
    name: str
    dynamics: object
    policy: object
    X0: HyperRect
    T: int
    goal: BoxRegion
    box_obstacles: list[BoxRegion] = field(default_factory=list)
    sphere_obstacles: list[SphereObstacle] = field(default_factory=list)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    bounds: BoundOptions = field(default_factory=BoundOptions)
    certify: CertifyConfig = field(default_factory=CertifyConfig)

    @property
    def n_x(self) -> int:
        return self.dynamics.n_x

    @property
    def position_dims(self) -> tuple:
        return self.dynamics.position_dims

    @property
    def velocity_dims(self) -> tuple:
        return self.dynamics.velocity_dims

    def closed_loop(self) -> ClosedLoop:
        return ClosedLoop(self.dynamics, self.policy)

    def replace(self, **changes) -> "Scenario":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "dynamics": self.dynamics.to_dict(),
            "policy": self.policy.to_dict(),
            "initial_set": [[float(a), float(b)] for a, b in zip(self.X0.lo, self.X0.hi)],
            "horizon": int(self.T),
            "goal": _box_dict(self.goal),
            "obstacles": {
                "boxes": [_box_dict(b) for b in self.box_obstacles],
                "spheres": [
                    {"center": _floats(s.center), "radius": float(s.radius), "margin": float(s.margin)}
                    for s in self.sphere_obstacles
                ],
            },
            "weights": self.weights.to_dict(),
            "train": self.train.to_dict(),
            "bounds": {
                "mode": self.bounds.mode,
                "intermediate": self.bounds.intermediate,
                "slope_gradients": self.bounds.slope_gradients,
                "bilinear_alternative": self.bounds.bilinear_alternative,
                "intersect_ibp": self.bounds.intersect_ibp,
            },
            "certify": self.certify.to_dict(),
        }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a)]


def _box_dict(b: BoxRegion) -> dict:
    hw = np.asarray(b.half_width)
    half = float(hw[0]) if np.all(hw == hw[0]) else _floats(hw)
    return {"center": _floats(b.center), "half_width": half}


# ---- parsing -------------------------------------------------------------------


class _Checker:
    def __init__(self):
        self.problems: list[tuple[str, str]] = []

    def bad(self, path: str, msg: str):
        self.problems.append((path, msg))

    def mapping(self, d, path, required=(), optional=()):
        if not isinstance(d, dict):
            self.bad(path, f"expected a mapping, got {type(d).__name__}")
            return {}
        for k in required:
            if k not in d:
                self.bad(f"{path}.{k}" if path else k, "missing required field")
        allowed = set(required) | set(optional)
        for k in d:
            if k not in allowed:
                self.bad(f"{path}.{k}" if path else str(k), "unknown field")
        return d

    def number(self, v, path, positive=False, nonneg=False):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.bad(path, f"expected a number, got {v!r}")
            return None
        v = float(v)
        if not np.isfinite(v):
            self.bad(path, "must be finite")
        elif positive and v <= 0:
            self.bad(path, f"must be positive, got {v}")
        elif nonneg and v < 0:
            self.bad(path, f"must be non-negative, got {v}")
        return v

    def integer(self, v, path, minimum=None):
        if isinstance(v, bool) or not isinstance(v, int):
            self.bad(path, f"expected an integer, got {v!r}")
            return None
        if minimum is not None and v < minimum:
            self.bad(path, f"must be >= {minimum}, got {v}")
        return v

    def boolean(self, v, path):
        if not isinstance(v, bool):
            self.bad(path, f"expected true/false, got {v!r}")
            return None
        return v

    def vector(self, v, path, length=None):
        if not isinstance(v, (list, tuple)):
            self.bad(path, f"expected a list of numbers, got {v!r}")
            return None
        vals = [self.number(x, f"{path}[{i}]") for i, x in enumerate(v)]
        if any(x is None for x in vals):
            return None
        if length is not None and len(vals) != length:
            self.bad(path, f"expected {length} entries, got {len(vals)}")
            return None
        return np.asarray(vals)


def _parse_dynamics(c: _Checker, d):
    d = c.mapping(d, "dynamics", ("kind",), ("dt", "c_d", "c_c"))
    kind = d.get("kind")
    if kind == "unicycle":
        for k in ("dt", "c_d", "c_c"):
            if k in d:
                c.bad(f"dynamics.{k}", "not a unicycle parameter")
        return Unicycle()
    if kind == "quadrotor":
        kw = {}
        for k in ("dt", "c_d", "c_c"):
            if k in d:
                v = c.number(d[k], f"dynamics.{k}", positive=(k == "dt"), nonneg=(k != "dt"))
                if v is not None:
                    kw[k] = v
        return Quadrotor(**kw)
    if kind is not None:
        c.bad("dynamics.kind", f"must be 'unicycle' or 'quadrotor', got {kind!r}")
    return None


def _parse_policy(c: _Checker, d, dyn):
    d = c.mapping(d, "policy", ("kind",), ("hidden",))
    kind = d.get("kind")
    if dyn is None:
        return None
    if kind == "mlp":
        hidden = d.get("hidden")
        if not isinstance(hidden, list) or not hidden:
            c.bad("policy.hidden", "expected a non-empty list of layer widths")
            return None
        ws = [c.integer(h, f"policy.hidden[{i}]", minimum=1) for i, h in enumerate(hidden)]
        if any(w is None for w in ws):
            return None
        return MlpPolicy([dyn.n_x, *ws, dyn.n_u])
    if kind == "affine":
        if "hidden" in d:
            c.bad("policy.hidden", "affine policies have no hidden layers")
        return AffinePolicy(dyn.n_x, dyn.n_u)
    if kind is not None:
        c.bad("policy.kind", f"must be 'mlp' or 'affine', got {kind!r}")
    return None


def _parse_box(c: _Checker, d, path, n):
    d = c.mapping(d, path, ("center",), ("half_width",))
    center = c.vector(d.get("center", []), f"{path}.center", n)
    hw = d.get("half_width", 0.5)
    if isinstance(hw, list):
        hw = c.vector(hw, f"{path}.half_width", n)
        ok = hw is not None and np.all(hw > 0)
    else:
        hw = c.number(hw, f"{path}.half_width", positive=True)
        ok = hw is not None and hw > 0
    if center is None or not ok:
        if hw is not None and not ok:
            c.bad(f"{path}.half_width", "must be positive")
        return None
    return BoxRegion(center, hw)


def _parse_section(c: _Checker, d, path, cls, ints=(), bools=(), positive=(), optional_ints=()):
    names = [f.name for f in fields(cls)]
    d = c.mapping(d, path, (), names)
    kw = {}
    for k, v in d.items():
        if k not in names:
            continue
        p = f"{path}.{k}"
        if k in optional_ints:
            kw[k] = None if v is None else c.integer(v, p, minimum=0)
        elif k in ints:
            kw[k] = c.integer(v, p, minimum=0)
        elif k in bools:
            kw[k] = c.boolean(v, p)
        else:
            kw[k] = c.number(v, p, positive=k in positive)
    if any(v is None and k not in optional_ints for k, v in kw.items()):
        return cls()
    return cls(**kw)


def from_dict(d) -> Scenario:
    c = _Checker()
    d = c.mapping(d, "", ("name", "dynamics", "policy", "initial_set", "horizon", "goal"),
                  ("obstacles", "weights", "train", "bounds", "certify"))
    name = d.get("name")
    if "name" in d and not isinstance(name, str):
        c.bad("name", "expected a string")
    dyn = _parse_dynamics(c, d.get("dynamics", {})) if "dynamics" in d else None
    pol = _parse_policy(c, d.get("policy", {}), dyn) if "policy" in d else None

    X0 = None
    if "initial_set" in d and dyn is not None:
        raw = d["initial_set"]
        if not isinstance(raw, list) or len(raw) != dyn.n_x:
            c.bad("initial_set", f"expected {dyn.n_x} [lo, hi] pairs")
        else:
            pairs = [c.vector(p, f"initial_set[{i}]", 2) for i, p in enumerate(raw)]
            if all(p is not None for p in pairs):
                arr = np.array(pairs)
                bad = np.nonzero(arr[:, 0] > arr[:, 1])[0]
                if bad.size:
                    c.bad(f"initial_set[{int(bad[0])}]", "lower end exceeds upper end")
                else:
                    X0 = HyperRect(arr[:, 0].copy(), arr[:, 1].copy())

    T = c.integer(d.get("horizon"), "horizon", minimum=1) if "horizon" in d else None
    n_pos = len(dyn.position_dims) if dyn is not None else None
    goal = _parse_box(c, d["goal"], "goal", n_pos) if "goal" in d and dyn is not None else None

    boxes, spheres = [], []
    obs = c.mapping(d.get("obstacles", {}) or {}, "obstacles", (), ("boxes", "spheres"))
    for i, b in enumerate(obs.get("boxes", []) or []):
        if dyn is not None:
            box = _parse_box(c, b, f"obstacles.boxes[{i}]", n_pos)
            if box is not None:
                boxes.append(box)
    for i, s in enumerate(obs.get("spheres", []) or []):
        p = f"obstacles.spheres[{i}]"
        s = c.mapping(s, p, ("center", "radius"), ("margin",))
        if dyn is None:
            continue
        center = c.vector(s.get("center", []), f"{p}.center", n_pos)
        r = c.number(s.get("radius"), f"{p}.radius", positive=True) if "radius" in s else None
        m = c.number(s.get("margin", 1.0), f"{p}.margin", nonneg=True)
        if center is not None and r is not None and r > 0 and m is not None and m >= 0:
            spheres.append(SphereObstacle(center, r, m))

    weights = _parse_section(c, d.get("weights", {}), "weights", LossWeights,
                             bools=("vol_normalized",), optional_ints=("t_inv",))
    if weights.t_inv is not None and T is not None and weights.t_inv >= T:
        c.bad("weights.t_inv", f"must be < horizon ({T})")
    if weights.w_inv and weights.t_inv is None:
        c.bad("weights.t_inv", "required when w_inv is nonzero")
    train = _parse_section(c, d.get("train", {}), "train", TrainConfig,
                           ints=("epochs", "seed", "plateau_window", "checkpoint_every", "cert_every"),
                           bools=("early_stop_on_cert",), positive=("lr",))

    bd = c.mapping(d.get("bounds", {}), "bounds", (),
                   ("mode", "intermediate", "slope_gradients", "bilinear_alternative", "intersect_ibp"))
    bkw = {}
    for k in ("mode", "intermediate"):
        if k in bd:
            if bd[k] not in ("crown", "ibp"):
                c.bad(f"bounds.{k}", f"must be 'crown' or 'ibp', got {bd[k]!r}")
            else:
                bkw[k] = bd[k]
    for k in ("slope_gradients", "bilinear_alternative", "intersect_ibp"):
        if k in bd and c.boolean(bd[k], f"bounds.{k}") is not None:
            bkw[k] = bd[k]
    certify = _parse_section(c, d.get("certify", {}), "certify", CertifyConfig,
                             bools=("require_goal", "require_invariance"))

    if c.problems:
        raise ScenarioError(c.problems)
    return Scenario(name, dyn, pol, X0, T, goal, boxes, spheres, weights, train,
                    BoundOptions(**bkw), certify)


def loads(text: str) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioError([("<file>", f"invalid YAML: {e}")]) from None
    return from_dict(data)


def load(path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = bundled_path(str(path))
        if bundled is None:
            raise FileNotFoundError(f"scenario file not found: {path}")
        path = bundled
    return loads(path.read_text())


def dumps(s: Scenario) -> str:
    return yaml.safe_dump(s.to_dict(), sort_keys=False, default_flow_style=None)


def dump(s: Scenario, path) -> None:
    Path(path).write_text(dumps(s))


def bundled_names() -> list[str]:
    root = resources.files("reachtrain") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name: str) -> Path | None:
    stem = name[:-5] if name.endswith(".yaml") else name
    p = Path(str(resources.files("reachtrain") / "scenarios" / f"{stem}.yaml"))
    return p if p.exists() else None


def bundled(name: str) -> Scenario:
    p = bundled_path(name)
    if p is None:
        raise FileNotFoundError(f"no bundled scenario named {name!r}; have {bundled_names()}")
    return loads(p.read_text())
