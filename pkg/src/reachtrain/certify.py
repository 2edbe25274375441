"""Reach-avoid and invariance checks on computed reach tubes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .crown import DEFAULT_OPTIONS, BoundOptions, HyperRect, ReachTube, rollout_bounds, step_bounds
from .losses import BoxRegion, SphereObstacle


def box_disjoint(r: HyperRect, region: BoxRegion, dims) -> bool:
    """True iff the positional part of ``r`` and the closed box ``region`` share no point."""
    lo = np.asarray(r.lo)[list(dims)]
    hi = np.asarray(r.hi)[list(dims)]
    return bool(np.any(hi < region.lo) or np.any(lo > region.hi))


def box_contains(outer: HyperRect, inner: HyperRect, tol: float = 0.0) -> bool:
    return bool(np.all(np.asarray(inner.lo) >= np.asarray(outer.lo) - tol)
                and np.all(np.asarray(inner.hi) <= np.asarray(outer.hi) + tol))


def containment_margins(outer: HyperRect, inner: HyperRect) -> np.ndarray:
    """Signed slack per face, ``(n, 2)``: ``[inner.lo - outer.lo, outer.hi - inner.hi]``."""
    return np.stack([np.asarray(inner.lo) - np.asarray(outer.lo),
                     np.asarray(outer.hi) - np.asarray(inner.hi)], axis=1)


def sphere_clearance(r: HyperRect, obs: SphereObstacle, dims) -> float:
    """Distance from the positional rect to the sphere surface (negative if they may meet)."""
    lo = np.asarray(r.lo)[list(dims)]
    hi = np.asarray(r.hi)[list(dims)]
    n = np.maximum(lo, np.minimum(hi, obs.center))
    return float(np.linalg.norm(n - obs.center) - obs.radius)


def goal_contains(r: HyperRect, goal: BoxRegion, dims) -> bool:
    lo = np.asarray(r.lo)[list(dims)]
    hi = np.asarray(r.hi)[list(dims)]
    return bool(np.all(lo >= goal.lo) and np.all(hi <= goal.hi))


@dataclass
class InvarianceCertificate:
    t: int
    rect: HyperRect
    image: HyperRect

    @property
    def margins(self) -> np.ndarray:
        return containment_margins(self.rect, self.image)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "lo": self.rect.lo.tolist(),
            "hi": self.rect.hi.tolist(),
            "image_lo": self.image.lo.tolist(),
            "image_hi": self.image.hi.tolist(),
            "min_margin": float(self.margins.min()),
        }


def invariance_check(graph, params, tube: ReachTube, start: int = 0,
                     opts: BoundOptions = DEFAULT_OPTIONS) -> InvarianceCertificate | None:
    """First ``t >= start`` whose one-step bound image lies inside ``R_t`` itself."""
    tube = tube.numpy()
    for t in range(start, tube.T + 1):
        rect = tube.rect(t)
        img = step_bounds(graph, params, rect, opts)
        if box_contains(rect, img):
            return InvarianceCertificate(t, rect, img)
    return None


def mc_soundness(closed_loop, params, X0: HyperRect, T: int, N: int, seed: int = 0,
                 tube: ReachTube | None = None, opts: BoundOptions = DEFAULT_OPTIONS) -> int:
    """Number of ``(sample, t, dim)`` events where an exact trajectory leaves the tube."""
    if N == 0:
        return 0
    if tube is None:
        tube = rollout_bounds(closed_loop.graph, params, X0, T, opts)
    tube = tube.numpy()
    # row i of the draw belongs to sample i whatever the processing order
    X = X0.sample(N, np.random.default_rng(seed))
    traj = closed_loop.simulate(params, X, T)
    below = traj < tube.lo[None, : T + 1]
    above = traj > tube.hi[None, : T + 1]
    return int(np.sum(below | above))


@dataclass
class CertReport:
    obstacle_free: list[bool]
    goal_step: int | None
    invariance: InvarianceCertificate | None = None
    mc_violations: int | None = None
    min_clearance: list[float] = field(default_factory=list)

    @property
    def avoids_obstacles(self) -> bool:
        return all(self.obstacle_free)

    @property
    def reach_avoid(self) -> bool:
        return self.avoids_obstacles and self.goal_step is not None

    def satisfied(self, require_goal: bool = True, require_invariance: bool = False) -> bool:
        ok = self.avoids_obstacles
        if require_goal:
            ok = ok and self.goal_step is not None
        if require_invariance:
            ok = ok and self.invariance is not None
        return ok

    def to_dict(self) -> dict:
        return {
            "obstacle_free": self.obstacle_free,
            "avoids_obstacles": self.avoids_obstacles,
            "goal_step": self.goal_step,
            "reach_avoid": self.reach_avoid,
            "invariance": None if self.invariance is None else self.invariance.to_dict(),
            "mc_violations": self.mc_violations,
            "min_clearance": self.min_clearance,
        }


def reach_avoid_flags(tube: ReachTube, scenario) -> tuple[list[bool], int | None, list[float]]:
    tube = tube.numpy()
    pd = scenario.position_dims
    flags, clear = [], []
    goal_step = None
    for t in range(tube.T + 1):
        r = tube.rect(t)
        ok = all(box_disjoint(r, b, pd) for b in scenario.box_obstacles)
        cl = [sphere_clearance(r, s, pd) for s in scenario.sphere_obstacles]
        ok = ok and all(c > 0 for c in cl)
        flags.append(bool(ok))
        clear.append(min(cl) if cl else float("inf"))
        if goal_step is None and goal_contains(r, scenario.goal, pd):
            goal_step = t
    return flags, goal_step, clear


def certify(scenario, params, tube: ReachTube | None = None, mc_samples: int = 0, seed: int = 0,
            check_invariance: bool | None = None) -> CertReport:
    """Run every check of ``scenario`` against the closed loop with ``params``."""
    cl = scenario.closed_loop()
    opts = scenario.bounds
    if tube is None:
        tube = rollout_bounds(cl.graph, params, scenario.X0, scenario.T, opts)
    tube = tube.numpy()
    flags, goal_step, clear = reach_avoid_flags(tube, scenario)
    if check_invariance is None:
        check_invariance = scenario.certify.require_invariance or bool(scenario.weights.w_inv)
    inv = None
    if check_invariance:
        start = scenario.weights.t_inv if scenario.weights.t_inv is not None else 0
        inv = invariance_check(cl.graph, params, tube, start, opts)
    mc = mc_soundness(cl, params, scenario.X0, scenario.T, mc_samples, seed, tube) if mc_samples else None
    return CertReport(flags, goal_step, inv, mc, clear)
