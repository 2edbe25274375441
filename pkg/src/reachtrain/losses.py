"""Reach-tube loss terms.

Each term takes a tube whose ``lo``/``hi`` have shape ``(T+1, n_x)`` and an array
namespace ``xp``.  Terms are non-negative before weighting (the normalized
volume variant excepted) and are summed over every timestep ``t = 0..T``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .backend import NUMPY


@dataclass
class BoxRegion:
    center: np.ndarray
    half_width: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_width = np.broadcast_to(np.asarray(self.half_width, dtype=np.float64),
                                          self.center.shape).copy()
        if np.any(self.half_width <= 0):
            raise ValueError(f"half_width must be positive, got {self.half_width}")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_width


@dataclass
class SphereObstacle:
    center: np.ndarray
    radius: float
    margin: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")


@dataclass
class LossWeights:
    w_goal: float = 0.0
    w_overlap_goal: float = 0.0
    w_overlap_obs: float = 0.0
    w_vol: float = 0.0
    w_inv: float = 0.0
    w_vel: float = 0.0
    w_obs_entry: float = 0.0
    w_obs_prox: float = 0.0
    t_inv: int | None = None
    vol_normalized: bool = False

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _cols(a, dims):
    return a[:, list(dims)]


def _const(v, shape):
    return np.broadcast_to(np.asarray(v, dtype=np.float64), shape)


def _row_norms(d, xp):
    return xp.sqrt(xp.sum(d * d, axis=1))


def overlap_loss(tube, region: BoxRegion, position_dims, xp=NUMPY):
    """Summed volume of the intersection of each positional rect with ``region``."""
    lo, hi = _cols(tube.lo, position_dims), _cols(tube.hi, position_dims)
    shape = np.shape(lo)
    top = xp.minimum(hi, _const(region.hi, shape))
    bot = xp.maximum(lo, _const(region.lo, shape))
    side = xp.maximum(top - bot, 0.0)
    return xp.sum(xp.prod(side, axis=1))


def goal_loss(tube, goal, position_dims, xp=NUMPY):
    """Summed distance from each rect center to ``goal``."""
    lo, hi = _cols(tube.lo, position_dims), _cols(tube.hi, position_dims)
    d = 0.5 * (hi + lo) - _const(goal, np.shape(lo))
    return xp.sum(_row_norms(d, xp))


def vol_loss(tube, xp=NUMPY, normalized: bool = False, ref_volume: float | None = None):
    """Summed rect volume over all state dims.

    ``normalized`` uses ``(vol_t - vol_0) / vol_0`` per step, ``vol_0`` being
    ``ref_volume`` (the initial-set volume when omitted).
    """
    vols = xp.prod(tube.hi - tube.lo, axis=1)
    if not normalized:
        return xp.sum(vols)
    v0 = ref_volume
    if v0 is None:
        v0 = float(np.prod(np.asarray(xp.raw(tube.hi[0])) - np.asarray(xp.raw(tube.lo[0]))))
    return xp.sum(vols - v0) * (1.0 / v0)


def inv_loss(tube, t_inv: int, xp=NUMPY):
    """Summed movement of the upper and lower corners from ``t_inv`` onward."""
    T = np.shape(tube.lo)[0] - 1
    if not 0 <= t_inv < T:
        raise ValueError(f"t_inv must satisfy 0 <= t_inv < T={T}, got {t_inv}")
    dh = tube.hi[t_inv + 1:] - tube.hi[t_inv:T]
    dl = tube.lo[t_inv + 1:] - tube.lo[t_inv:T]
    return xp.sum(_row_norms(dh, xp)) + xp.sum(_row_norms(dl, xp))


def vel_loss(tube, velocity_dims, xp=NUMPY):
    return xp.sum(xp.abs(_cols(tube.hi, velocity_dims))) + xp.sum(xp.abs(_cols(tube.lo, velocity_dims)))


def nearest_points(tube, center, position_dims, xp=NUMPY):
    """Per-step point of the positional rect closest to ``center``."""
    lo, hi = _cols(tube.lo, position_dims), _cols(tube.hi, position_dims)
    c = _const(center, np.shape(lo))
    return xp.maximum(lo, xp.minimum(hi, c))


def _sphere_penalty(tube, obstacles, position_dims, xp, with_margin: bool):
    total = 0.0
    for ob in obstacles:
        n = nearest_points(tube, ob.center, position_dims, xp)
        d = _row_norms(n - _const(ob.center, np.shape(n)), xp)
        reach = ob.radius + (ob.margin if with_margin else 0.0)
        gap = xp.maximum(reach - d, 0.0)
        total = total + xp.sum(gap * gap)
    return total


def obs_entry_loss(tube, obstacles, position_dims, xp=NUMPY):
    return _sphere_penalty(tube, obstacles, position_dims, xp, with_margin=False)


def obs_prox_loss(tube, obstacles, position_dims, xp=NUMPY):
    return _sphere_penalty(tube, obstacles, position_dims, xp, with_margin=True)


def loss_terms(tube, scenario, weights: LossWeights | None = None, xp=NUMPY) -> dict:
    """Unweighted terms whose weight is nonzero."""
    w = weights or scenario.weights
    pd = scenario.position_dims
    terms = {}
    if w.w_goal:
        terms["goal"] = goal_loss(tube, scenario.goal.center, pd, xp)
    if w.w_overlap_goal:
        terms["overlap_goal"] = overlap_loss(tube, scenario.goal, pd, xp)
    if w.w_overlap_obs and scenario.box_obstacles:
        acc = 0.0
        for box in scenario.box_obstacles:
            acc = acc + overlap_loss(tube, box, pd, xp)
        terms["overlap_obs"] = acc
    if w.w_vol:
        terms["vol"] = vol_loss(tube, xp, w.vol_normalized, scenario.X0.volume())
    if w.w_inv:
        if w.t_inv is None:
            raise ValueError("w_inv is nonzero but t_inv is not set")
        terms["inv"] = inv_loss(tube, w.t_inv, xp)
    if w.w_vel:
        terms["vel"] = vel_loss(tube, scenario.velocity_dims, xp)
    if w.w_obs_entry and scenario.sphere_obstacles:
        terms["obs_entry"] = obs_entry_loss(tube, scenario.sphere_obstacles, pd, xp)
    if w.w_obs_prox and scenario.sphere_obstacles:
        terms["obs_prox"] = obs_prox_loss(tube, scenario.sphere_obstacles, pd, xp)
    return terms


# goal overlap is a reward: its weight enters with a minus sign
SIGNS = {"goal": 1.0, "overlap_goal": -1.0, "overlap_obs": 1.0, "vol": 1.0, "inv": 1.0,
         "vel": 1.0, "obs_entry": 1.0, "obs_prox": 1.0}


def combine(terms: dict, weights: LossWeights):
    total = 0.0
    for name, value in terms.items():
        total = total + SIGNS[name] * getattr(weights, "w_" + name) * value
    return total


def total_loss(tube, scenario, weights: LossWeights | None = None, xp=NUMPY):
    """``w_goal*goal - w_overlap_goal*overlap_goal + w_overlap_obs*overlap_obs + ...``"""
    w = weights or scenario.weights
    return combine(loss_terms(tube, scenario, w, xp), w)
