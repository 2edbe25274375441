"""Interval arithmetic and per-primitive linear relaxations.

All array functions are vectorized over elements and take an array namespace
``xp`` (see :mod:`reachtrain.backend`), so the same code yields plain numbers,
diffcore tape entries, or traced jax values.  Case selection uses ``xp.where``
on masks computed from raw endpoint values; at a case boundary the first listed
branch wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .backend import NUMPY

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi
SQRT2_M1 = math.sqrt(2.0) - 1.0


@dataclass(frozen=True)
class Interval:
    """A closed scalar interval ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError(f"interval endpoints must be finite, got [{lo}, {hi}]")
        if lo > hi:
            raise ValueError(f"interval lower end {lo} exceeds upper end {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, z: float) -> bool:
        return self.lo <= z <= self.hi

    def _wrap(self, pair) -> "Interval":
        return Interval(float(pair[0]), float(pair[1]))

    def __add__(self, o: "Interval") -> "Interval":
        return self._wrap(iv_add(self.lo, self.hi, o.lo, o.hi))

    def __sub__(self, o: "Interval") -> "Interval":
        return self._wrap(iv_sub(self.lo, self.hi, o.lo, o.hi))

    def __mul__(self, o: "Interval") -> "Interval":
        return self._wrap(iv_mul(self.lo, self.hi, o.lo, o.hi))

    def sin(self) -> "Interval":
        return self._wrap(iv_sin(np.float64(self.lo), np.float64(self.hi)))

    def cos(self) -> "Interval":
        return self._wrap(iv_cos(np.float64(self.lo), np.float64(self.hi)))

    def abs(self) -> "Interval":
        return self._wrap(iv_abs(np.float64(self.lo), np.float64(self.hi)))

    def signed_square(self) -> "Interval":
        return self._wrap(iv_signed_square(np.float64(self.lo), np.float64(self.hi)))

    def relu(self) -> "Interval":
        return self._wrap(iv_relu(self.lo, self.hi))


def interval_matvec(W, ivs: list[Interval]) -> list[Interval]:
    lo = np.array([iv.lo for iv in ivs])
    hi = np.array([iv.hi for iv in ivs])
    out_lo, out_hi = iv_matmul(np.asarray(W, dtype=np.float64), lo, hi)
    return [Interval(a, b) for a, b in zip(out_lo, out_hi)]


@dataclass
class LinearRelaxation:
    """``slope_lo*z + intercept_lo <= g(z) <= slope_up*z + intercept_up`` elementwise."""

    slope_lo: Any
    intercept_lo: Any
    slope_up: Any
    intercept_up: Any

    def lower(self, z):
        return self.slope_lo * z + self.intercept_lo

    def upper(self, z):
        return self.slope_up * z + self.intercept_up


@dataclass
class BilinearRelaxation:
    """Planes ``a_x*x + a_y*y + c`` bounding ``x*y`` from below (``lo_*``) and above (``up_*``)."""

    lo_x: Any
    lo_y: Any
    lo_c: Any
    up_x: Any
    up_y: Any
    up_c: Any

    def lower(self, x, y):
        return self.lo_x * x + self.lo_y * y + self.lo_c

    def upper(self, x, y):
        return self.up_x * x + self.up_y * y + self.up_c


# ---- interval arithmetic -------------------------------------------------------


def iv_add(alo, ahi, blo, bhi):
    return alo + blo, ahi + bhi


def iv_sub(alo, ahi, blo, bhi):
    return alo - bhi, ahi - blo


def iv_mul(alo, ahi, blo, bhi, xp=NUMPY):
    p1, p2, p3, p4 = alo * blo, alo * bhi, ahi * blo, ahi * bhi
    lo = xp.minimum(xp.minimum(p1, p2), xp.minimum(p3, p4))
    hi = xp.maximum(xp.maximum(p1, p2), xp.maximum(p3, p4))
    return lo, hi


def iv_matmul(W, lo, hi, xp=NUMPY):
    """Enclosure of ``{W @ x : lo <= x <= hi}``."""
    Wp = xp.maximum(W, 0.0)
    Wn = xp.minimum(W, 0.0)
    return Wp @ lo + Wn @ hi, Wp @ hi + Wn @ lo


def iv_relu(lo, hi, xp=NUMPY):
    return xp.relu(lo), xp.relu(hi)


def iv_signed_square(lo, hi, xp=NUMPY):
    # v|v| is monotone increasing
    return xp.signed_square(lo), xp.signed_square(hi)


def iv_abs(lo, hi, xp=NUMPY):
    rlo, rhi = xp.raw(lo), xp.raw(hi)
    pos = rlo >= 0
    neg = xp.logical_and(xp.logical_not(pos), rhi <= 0)
    out_lo = xp.where(pos, lo, xp.where(neg, -hi, 0.0))
    out_hi = xp.where(pos, hi, xp.where(neg, -lo, xp.maximum(-lo, hi)))
    return out_lo, out_hi


def _contains_phase(rlo, rhi, phase, xp):
    """Mask of intervals containing ``phase + 2*pi*k`` for some integer k."""
    return xp.ceil((rlo - phase) / TWO_PI) <= xp.floor((rhi - phase) / TWO_PI)


def iv_sin(lo, hi, xp=NUMPY):
    rlo, rhi = xp.raw(lo), xp.raw(hi)
    slo, shi = xp.sin(lo), xp.sin(hi)
    top = xp.where(_contains_phase(rlo, rhi, HALF_PI, xp), 1.0, xp.maximum(slo, shi))
    bot = xp.where(_contains_phase(rlo, rhi, -HALF_PI, xp), -1.0, xp.minimum(slo, shi))
    return bot, top


def iv_cos(lo, hi, xp=NUMPY):
    return iv_sin(lo + HALF_PI, hi + HALF_PI, xp)


# ---- linear relaxations --------------------------------------------------------


def relu_relax(lo, hi, xp=NUMPY) -> LinearRelaxation:
    """CROWN relaxation; lower slope 1 when ``|hi| >= |lo|`` else 0."""
    rlo, rhi = xp.raw(lo), xp.raw(hi)
    active = rlo >= 0
    dead = xp.logical_and(xp.logical_not(active), rhi <= 0)
    straddle = xp.logical_not(xp.logical_or(active, dead))
    denom = xp.where(straddle, hi - lo, 1.0)
    chord = hi / denom
    slope_up = xp.where(active, 1.0, xp.where(dead, 0.0, chord))
    icpt_up = xp.where(straddle, -lo * chord, 0.0)
    slope_lo = xp.where(active, 1.0, xp.where(dead, 0.0, xp.where(rhi >= -rlo, 1.0, 0.0)))
    icpt_lo = xp.zeros(np.shape(rlo))
    return LinearRelaxation(slope_lo, icpt_lo, slope_up, icpt_up)


def sin_relax(lo, hi, xp=NUMPY) -> LinearRelaxation:
    """Tangent-at-midpoint and chord on a single concave/convex arc, constants otherwise."""
    rlo, rhi = xp.raw(lo), xp.raw(hi)
    arc = xp.floor(rlo / math.pi)
    one_arc = arc >= xp.ceil(rhi / math.pi) - 1.0
    concave = xp.logical_and(one_arc, arc - 2.0 * xp.floor(arc / 2.0) == 0.0)
    convex = xp.logical_and(one_arc, xp.logical_not(concave))
    flat = rhi - rlo <= 0.0

    mid = 0.5 * (lo + hi)
    t_slope = xp.cos(mid)
    t_icpt = xp.sin(mid) - mid * t_slope
    slo = xp.sin(lo)
    width = xp.where(flat, 1.0, hi - lo)
    c_slope = xp.where(flat, t_slope, (xp.sin(hi) - slo) / width)
    c_icpt = xp.where(flat, t_icpt, slo - lo * c_slope)

    bot, top = iv_sin(lo, hi, xp)
    slope_up = xp.where(concave, t_slope, xp.where(convex, c_slope, 0.0))
    icpt_up = xp.where(concave, t_icpt, xp.where(convex, c_icpt, top))
    slope_lo = xp.where(concave, c_slope, xp.where(convex, t_slope, 0.0))
    icpt_lo = xp.where(concave, c_icpt, xp.where(convex, t_icpt, bot))
    return LinearRelaxation(slope_lo, icpt_lo, slope_up, icpt_up)


def cos_relax(lo, hi, xp=NUMPY) -> LinearRelaxation:
    # cos z = sin(z + pi/2); shift the intercepts back to z
    r = sin_relax(lo + HALF_PI, hi + HALF_PI, xp)
    return LinearRelaxation(
        r.slope_lo,
        r.intercept_lo + HALF_PI * r.slope_lo,
        r.slope_up,
        r.intercept_up + HALF_PI * r.slope_up,
    )


def bilinear_relax(xlo, xhi, ylo, yhi, alternative: bool = False) -> BilinearRelaxation:
    """One McCormick plane per side for ``x*y`` over the box ``[xlo,xhi] x [ylo,yhi]``.

    Default pair is anchored at ``xlo``; ``alternative=True`` anchors both at ``xhi``.
    """
    if alternative:
        return BilinearRelaxation(yhi, xhi, -xhi * yhi, ylo, xhi, -xhi * ylo)
    return BilinearRelaxation(ylo, xlo, -xlo * ylo, yhi, xlo, -xlo * yhi)


def signed_square_relax(lo, hi, xp=NUMPY) -> LinearRelaxation:
    """Relaxation of ``v|v|`` (concave for v<0, convex for v>0).

    Same-sign intervals: chord on the outer side, tangent at the endpoint nearest
    zero on the inner side.  Straddling intervals: tangent at the larger-magnitude
    endpoint on one side; on the other side the chord when it clears the curve,
    otherwise the line through the larger endpoint tangent to the opposite arc.
    """
    rlo, rhi = xp.raw(lo), xp.raw(hi)
    convex = rlo >= 0
    concave = xp.logical_and(xp.logical_not(convex), rhi <= 0)
    straddle = xp.logical_not(xp.logical_or(convex, concave))
    right_heavy = rhi >= -rlo

    glo, ghi = xp.signed_square(lo), xp.signed_square(hi)
    flat = rhi - rlo <= 0.0
    width = xp.where(flat, 1.0, hi - lo)
    c_slope = xp.where(flat, 2.0 * xp.abs(lo), (ghi - glo) / width)
    c_icpt = glo - lo * c_slope

    # tangents at each endpoint: g(a) + 2|a| (v - a) = 2|a| v - a|a|
    tl_slope, tl_icpt = 2.0 * xp.abs(lo), -glo
    th_slope, th_icpt = 2.0 * xp.abs(hi), -ghi

    # straddle, hi side heavier: chord is an upper bound iff its slope >= g'(lo)
    rc_slope = xp.raw(c_slope)
    chord_up_ok = rc_slope >= -2.0 * rlo
    chord_lo_ok = rc_slope >= 2.0 * rhi
    # line through (hi, hi^2) tangent to the concave arc: slope 2(sqrt2-1)hi, intercept ((sqrt2-1)hi)^2
    hs, ht = 2.0 * SQRT2_M1 * hi, (SQRT2_M1 * hi) * (SQRT2_M1 * hi)
    # line through (lo, -lo^2) tangent to the convex arc: slope -2(sqrt2-1)lo, intercept -((sqrt2-1)lo)^2
    ls, lt = -2.0 * SQRT2_M1 * lo, -(SQRT2_M1 * lo) * (SQRT2_M1 * lo)

    up_s_str = xp.where(right_heavy, xp.where(chord_up_ok, c_slope, hs), tl_slope)
    up_i_str = xp.where(right_heavy, xp.where(chord_up_ok, c_icpt, ht), tl_icpt)
    lo_s_str = xp.where(right_heavy, th_slope, xp.where(chord_lo_ok, c_slope, ls))
    lo_i_str = xp.where(right_heavy, th_icpt, xp.where(chord_lo_ok, c_icpt, lt))

    slope_up = xp.where(convex, c_slope, xp.where(concave, th_slope, up_s_str))
    icpt_up = xp.where(convex, c_icpt, xp.where(concave, th_icpt, up_i_str))
    slope_lo = xp.where(convex, tl_slope, xp.where(concave, c_slope, lo_s_str))
    icpt_lo = xp.where(convex, tl_icpt, xp.where(concave, c_icpt, lo_i_str))
    return LinearRelaxation(slope_lo, icpt_lo, slope_up, icpt_up)


UNARY_RELAXATIONS = {
    "relu": relu_relax,
    "sin": sin_relax,
    "cos": cos_relax,
    "signed_square": signed_square_relax,
}

UNARY_INTERVALS = {
    "relu": iv_relu,
    "sin": iv_sin,
    "cos": iv_cos,
    "signed_square": iv_signed_square,
    "abs": iv_abs,
}
