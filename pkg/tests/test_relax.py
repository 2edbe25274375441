import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from reachtrain import relax
from reachtrain.backend import BranchRecorder, DIFFCORE
from reachtrain import diffcore as dc
from reachtrain.relax import Interval

from conftest import central_diff, rel_err

SS = lambda z: z * np.abs(z)  # noqa: E731

FUNCS = {
    "relu": (relax.relu_relax, lambda z: np.maximum(z, 0.0)),
    "sin": (relax.sin_relax, np.sin),
    "cos": (relax.cos_relax, np.cos),
    "signed_square": (relax.signed_square_relax, SS),
}


def _relax(name, lo, hi):
    fn, _ = FUNCS[name]
    return fn(np.float64(lo), np.float64(hi))


def dense_slack(name, lo, hi, n=10_000):
    """Smallest gap between the bounds and the function over ``n`` grid points."""
    r = _relax(name, lo, hi)
    z = np.linspace(lo, hi, n)
    g = FUNCS[name][1](z)
    return min(float(np.min(g - r.lower(z))), float(np.min(r.upper(z) - g)))


# ---- relu --------------------------------------------------------------------------


def test_relu_positive_is_identity():
    r = _relax("relu", 1, 2)
    assert (r.slope_lo, r.slope_up, r.intercept_lo, r.intercept_up) == (1, 1, 0, 0)


def test_relu_negative_is_zero():
    r = _relax("relu", -2, -1)
    assert (r.slope_lo, r.slope_up, r.intercept_lo, r.intercept_up) == (0, 0, 0, 0)


def test_relu_straddle_chord_and_adaptive_lower():
    r = _relax("relu", -1, 1)
    assert r.slope_up == 0.5 and r.intercept_up == 0.5
    assert r.slope_lo == 1.0 and r.intercept_lo == 0.0
    assert _relax("relu", -2, 1).slope_lo == 0.0


# ---- trig ----------------------------------------------------------------------------


def test_sin_concave_arc():
    r = _relax("sin", 0, math.pi / 2)
    assert math.isclose(r.slope_lo, 2 / math.pi) and abs(r.intercept_lo) < 1e-15
    m = math.pi / 4
    assert math.isclose(r.slope_up, math.cos(m))
    assert math.isclose(r.intercept_up, math.sin(m) - m * math.cos(m))


def test_cos_point_interval_is_constant_one():
    r = _relax("cos", 0, 0)
    for z in (0.0,):
        assert r.lower(z) == 1.0 and r.upper(z) == 1.0


def test_sin_full_period_constant():
    r = _relax("sin", -math.pi, math.pi)
    assert (r.slope_lo, r.slope_up) == (0.0, 0.0)
    assert r.intercept_lo == -1.0 and r.intercept_up == 1.0


def test_sin_convex_arc_mirrors():
    r = _relax("sin", -math.pi / 2, 0)
    assert math.isclose(r.slope_up, 2 / math.pi)
    assert math.isclose(r.slope_lo, math.cos(-math.pi / 4))


# ---- bilinear ---------------------------------------------------------------------------


def test_bilinear_zero_factor():
    b = relax.bilinear_relax(0.0, 0.0, -3.0, 2.0)
    for y in (-3.0, 0.0, 2.0):
        assert b.lower(0.0, y) == 0.0 and b.upper(0.0, y) == 0.0


def test_bilinear_constant_factor_is_exact():
    b = relax.bilinear_relax(1.0, 1.0, -0.5, 4.0)
    for y in (-0.5, 1.0, 4.0):
        assert b.lower(1.0, y) == y and b.upper(1.0, y) == y


def test_bilinear_planes_match_formula():
    b = relax.bilinear_relax(-1.0, 2.0, -3.0, 0.5)
    assert (b.lo_x, b.lo_y, b.lo_c) == (-3.0, -1.0, -3.0)
    assert (b.up_x, b.up_y, b.up_c) == (0.5, -1.0, 0.5)


@pytest.mark.parametrize("alternative", [False, True])
def test_bilinear_unit_box_corners(alternative):
    b = relax.bilinear_relax(-1.0, 1.0, -1.0, 1.0, alternative)
    for x in (-1.0, 1.0):
        for y in (-1.0, 1.0):
            assert b.lower(x, y) <= x * y <= b.upper(x, y)


# ---- signed square -------------------------------------------------------------------------


def test_signed_square_convex_branch():
    r = _relax("signed_square", 0, 1)
    assert (r.slope_lo, r.intercept_lo) == (0.0, 0.0)
    assert (r.slope_up, r.intercept_up) == (1.0, 0.0)


def test_signed_square_concave_branch_is_mirror():
    r = _relax("signed_square", -1, 0)
    assert (r.slope_up, r.intercept_up) == (0.0, 0.0)
    assert (r.slope_lo, r.intercept_lo) == (1.0, 0.0)


def test_signed_square_straddle_dense():
    assert dense_slack("signed_square", -1.0, 2.0) >= -1e-12


def test_signed_square_straddle_uses_chord_when_sound():
    # chord of [-0.2, 2] has slope 1.82 >= g'(-0.2)=0.4, so it is a valid upper line
    r = _relax("signed_square", -0.2, 2.0)
    assert math.isclose(r.slope_up, (4.0 + 0.04) / 2.2)
    assert math.isclose(r.slope_lo, 4.0)  # tangent at the larger endpoint


# ---- interval arithmetic ----------------------------------------------------------------------


def test_interval_examples():
    s = Interval(1, 2) + Interval(3, 4)
    assert (s.lo, s.hi) == (4, 6)
    p = Interval(-1, 2) * Interval(-3, 1)
    assert (p.lo, p.hi) == (-6, 3)
    q = Interval(0, math.pi / 2).sin()
    assert q.lo == 0.0 and math.isclose(q.hi, 1.0)


def test_interval_validates():
    with pytest.raises(ValueError):
        Interval(2, 1)
    with pytest.raises(ValueError):
        Interval(0, math.inf)


@given(st.floats(-10, 10), st.floats(0, 10), st.floats(-10, 10), st.floats(0, 10))
def test_interval_ops_enclose_samples(a, wa, b, wb):
    A, B = Interval(a, a + wa), Interval(b, b + wb)
    xs = np.linspace(A.lo, A.hi, 41)
    ys = np.linspace(B.lo, B.hi, 41)
    X, Y = np.meshgrid(xs, ys)
    for iv, vals in ((A + B, X + Y), (A - B, X - Y), (A * B, X * Y)):
        assert iv.lo <= vals.min() + 1e-12 and vals.max() - 1e-12 <= iv.hi
    for iv, vals in ((A.sin(), np.sin(xs)), (A.cos(), np.cos(xs)), (A.abs(), np.abs(xs)),
                     (A.signed_square(), SS(xs)), (A.relu(), np.maximum(xs, 0))):
        assert iv.lo <= vals.min() + 1e-12 and vals.max() - 1e-12 <= iv.hi


def test_interval_matvec_encloses(rng):
    W = rng.normal(size=(3, 4))
    ivs = [Interval(-1, 0.5), Interval(0.2, 0.3), Interval(-2, -1), Interval(0, 0)]
    out = relax.interval_matvec(W, ivs)
    lo = np.array([i.lo for i in ivs])
    hi = np.array([i.hi for i in ivs])
    pts = lo + (hi - lo) * rng.random((2000, 4))
    img = pts @ W.T
    assert all(o.lo <= img[:, k].min() and img[:, k].max() <= o.hi for k, o in enumerate(out))


# ---- universal soundness, exactness, gradients ------------------------------------------------


def random_interval(rng, name):
    c = rng.uniform(-6, 6)
    w = rng.choice([rng.uniform(0, 0.1), rng.uniform(0, 2), rng.uniform(0, 8)])
    return c - w / 2, c + w / 2


@pytest.mark.parametrize("name", sorted(FUNCS))
def test_relaxation_soundness_dense(name):
    rng = np.random.default_rng(len(name))
    worst = min(dense_slack(name, *random_interval(rng, name)) for _ in range(1000))
    assert worst >= -1e-12


@pytest.mark.parametrize("name", sorted(FUNCS))
@given(st.floats(-20, 20))
def test_relaxation_exact_on_point(name, z):
    r = _relax(name, z, z)
    g = FUNCS[name][1](np.float64(z))
    assert abs(r.lower(z) - g) <= 1e-12 * max(1, abs(g))
    assert abs(r.upper(z) - g) <= 1e-12 * max(1, abs(g))


def _coef_vector(name, lo, hi, xp):
    r = FUNCS[name][0](lo, hi, xp)
    return [r.slope_lo, r.intercept_lo, r.slope_up, r.intercept_up]


@pytest.mark.parametrize("name", sorted(FUNCS))
def test_relaxation_endpoint_gradients_match_fd(name):
    rng = np.random.default_rng(100 + len(name))
    weights = np.array([0.3, -1.1, 0.7, 1.9])
    checked = 0
    while checked < 50:
        lo, hi = random_interval(rng, name)
        # skip intervals whose case analysis changes within the FD stencil
        rec = BranchRecorder()
        sigs = []
        for dlo in (-1e-4, 0.0, 1e-4):
            for dhi in (-1e-4, 0.0, 1e-4):
                rec.log.clear()
                _coef_vector(name, np.float64(lo + dlo), np.float64(hi + dhi), rec)
                sigs.append(tuple(np.asarray(m).tobytes() for m in rec.log))
        if len(set(sigs)) > 1 or hi - lo < 1e-3:
            continue
        tape = dc.Tape()
        plo, phi = tape.param(lo), tape.param(hi)
        coefs = _coef_vector(name, plo, phi, DIFFCORE)
        out = 0.0
        for w, c in zip(weights, coefs):
            out = out + w * c
        if not isinstance(out, dc.Tensor):
            checked += 1
            continue
        g = tape.backward(out)

        def f(v):
            return float(sum(w * float(c) for w, c in zip(weights, _coef_vector(name, np.float64(v[0]), np.float64(v[1]), relax.NUMPY))))

        fd = central_diff(f, np.array([lo, hi]))
        assert rel_err(np.array([g[plo], g[phi]]), fd, floor=1e-3) < 1e-4, (name, lo, hi)
        checked += 1
