"""Expression core: parsing, evaluation, intervals, differentiation."""

from __future__ import annotations

import math

import numpy as np
import pytest

from bcsynth.expr import (
    Add,
    Box,
    CompiledExprs,
    Const,
    Cos,
    Div,
    EnclosureError,
    EvalError,
    Exp,
    Interval,
    Mul,
    Neg,
    ParseError,
    PowInt,
    Sin,
    Sub,
    Tanh,
    Var,
    differentiate,
    eval_batch,
    eval_interval,
    eval_point,
    free_variables,
    lie_derivative,
    parse_expr,
    polynomial_degree,
    print_expr,
    simplify,
)

from conftest import random_expr

XY = ["x", "y"]

DARBOUX_FIELD = [
    parse_expr("y + 2*x*y", XY),
    parse_expr("-x + 2*x^2 - y^2", XY),
]


def sample_points(rng, n, lo=-2.0, hi=2.0, dim=2):
    return rng.uniform(lo, hi, size=(n, dim))


# ---------------------------------------------------------------------------
# parsing and printing
# ---------------------------------------------------------------------------


def test_parse_darboux_field_matches_hand_tree():
    rng = np.random.default_rng(1)
    pts = sample_points(rng, 200)
    hand = Add(Var(1), Mul(Const(2.0), Mul(Var(0), Var(1))))
    np.testing.assert_allclose(
        eval_batch(DARBOUX_FIELD[0], pts), eval_batch(hand, pts), rtol=0, atol=0
    )
    want = -pts[:, 0] + 2 * pts[:, 0] ** 2 - pts[:, 1] ** 2
    np.testing.assert_allclose(eval_batch(DARBOUX_FIELD[1], pts), want, rtol=1e-15)


def test_parse_exponential_shorthand():
    e = parse_expr("e^(-x) + y - 1", XY)
    rng = np.random.default_rng(2)
    pts = sample_points(rng, 100)
    want = np.exp(-pts[:, 0]) + pts[:, 1] - 1.0
    np.testing.assert_allclose(eval_batch(e, pts), want, rtol=1e-15)


def test_parse_e_caret_binds_following_atom():
    assert eval_point(parse_expr("e^2", []), []) == pytest.approx(math.e**2, rel=1e-15)
    assert eval_point(parse_expr("e", []), []) == math.e
    # a declared variable named e wins for the bare identifier
    assert eval_point(parse_expr("e + 1", ["e"]), [5.0]) == 6.0


def test_unary_minus_binds_before_power():
    # per the grammar "-sin(x)^2" is (-sin(x))^2, not -(sin(x)^2)
    e = parse_expr("-sin(x)^2", XY)
    assert eval_point(e, [0.5, 0.0]) == pytest.approx(math.sin(0.5) ** 2, rel=1e-15)
    e2 = parse_expr("-(sin(x)^2)", XY)
    assert eval_point(e2, [0.5, 0.0]) == pytest.approx(-math.sin(0.5) ** 2, rel=1e-15)


def test_parse_left_associativity_and_precedence():
    assert eval_point(parse_expr("1 - 2 - 3", []), []) == -4.0
    assert eval_point(parse_expr("8 / 2 / 2", []), []) == 2.0
    assert eval_point(parse_expr("1 + 2 * 3", []), []) == 7.0
    assert eval_point(parse_expr("2 * 3^2", []), []) == 18.0


def test_parse_scientific_literals():
    assert eval_point(parse_expr("1e-3", []), []) == 1e-3
    assert eval_point(parse_expr("2.5e2 + 1", []), []) == 251.0


@pytest.mark.parametrize(
    "bad",
    ["x +", "x ^ -1", "x^2.5", "(x", "x)", "unknown_name", "2e", "x 3", "sin", ""],
)
def test_parse_rejects_malformed(bad):
    with pytest.raises(ParseError):
        parse_expr(bad, XY)


def test_eval_point_errors_on_unknown_index():
    with pytest.raises(EvalError):
        eval_point(Var(3), [1.0, 2.0])


def test_roundtrip_exact_on_random_trees():
    rng = np.random.default_rng(3)
    names = ["x", "y", "z"]
    for _ in range(300):
        e = random_expr(rng, 3, int(rng.integers(1, 6)))
        text = print_expr(e, names)
        back = parse_expr(text, names)
        pts = rng.uniform(-2, 2, size=(25, 3))
        a = eval_batch(e, pts)
        b = eval_batch(back, pts)
        ok = np.isfinite(a)
        # printer preserves structure, so finite values must match bit for bit
        assert np.array_equal(a[ok], b[ok])
        assert np.array_equal(np.isnan(a), np.isnan(b))


def test_print_specific_forms():
    assert print_expr(Neg(PowInt(Sin(Var(0)), 2)), ["x"]) == "-(sin(x)^2)"
    assert print_expr(Sub(Var(0), Sub(Var(1), Const(1.0))), XY) == "x - (y - 1.0)"
    assert print_expr(Mul(Const(2.0), Add(Var(0), Var(1))), XY) == "2.0 * (x + y)"


# ---------------------------------------------------------------------------
# exact evaluation
# ---------------------------------------------------------------------------


def test_eval_point_darboux_value():
    # second field component at (1, 1): -1 + 2 - 1 = 0
    assert eval_point(DARBOUX_FIELD[1], [1.0, 1.0]) == 0.0
    assert eval_point(DARBOUX_FIELD[0], [1.0, 1.0]) == 3.0


def test_eval_point_division_by_zero_names_subtree():
    e = Div(Const(1.0), Var(0))
    with pytest.raises(EvalError, match="division by zero"):
        eval_point(e, [0.0])


def test_eval_batch_ieee_semantics():
    e = Div(Const(1.0), Var(0))
    out = eval_batch(e, np.array([[0.0], [2.0]]))
    assert math.isinf(out[0]) and out[1] == 0.5


def test_compiled_exprs_share_common_subtrees():
    shared = Add(Var(0), Const(1.0))
    e1 = Mul(shared, shared)
    e2 = Sin(shared)
    c = CompiledExprs([e1, e2])
    # shared + const + var + mul + sin = 5 nodes, not 7
    assert c.n_nodes == 5
    v1, v2 = c.eval_points(np.array([[2.0]]))
    assert v1[0] == 9.0 and v2[0] == pytest.approx(math.sin(3.0))


# ---------------------------------------------------------------------------
# interval arithmetic
# ---------------------------------------------------------------------------


def test_interval_example_quadratic():
    iv = eval_interval(parse_expr("x^2 - y", XY), Box.from_bounds([[0, 1], [0, 1]]))
    assert iv.lo <= -1.0 <= iv.hi and iv.lo <= 1.0 <= iv.hi
    assert iv.lo >= -1.0 - 1e-9 and iv.hi <= 1.0 + 1e-9


def test_interval_sin_contains_extremum():
    iv = eval_interval(Sin(Var(0)), Box.from_bounds([[0.0, math.pi]]))
    assert iv.hi == 1.0
    assert -1e-9 <= iv.lo <= 0.0
    iv2 = eval_interval(Sin(Var(0)), Box.from_bounds([[0.1, 0.2]]))
    assert iv2.lo <= math.sin(0.1) and iv2.hi >= math.sin(0.2)
    assert iv2.hi < 0.21  # no spurious extremum


def test_interval_even_power_tightening():
    iv = eval_interval(PowInt(Var(0), 2), Box.from_bounds([[-1.0, 2.0]]))
    assert iv.lo == 0.0
    assert 4.0 <= iv.hi <= 4.0 + 1e-12


def test_interval_division_failure():
    with pytest.raises(EnclosureError):
        eval_interval(Div(Const(1.0), Var(0)), Box.from_bounds([[-1.0, 1.0]]))


def test_interval_obstacle_denominator_positive():
    den = parse_expr("0.5 + x^2 + y^2", XY)
    iv = eval_interval(den, Box.from_bounds([[-2, 2], [-2, 2]]))
    assert iv.lo >= 0.5 - 1e-9
    # the full steering term therefore encloses without division failure
    u = parse_expr(
        "-sin(phi) + 3 * (x * sin(phi) + y * cos(phi)) / (0.5 + x^2 + y^2)",
        ["x", "y", "phi"],
    )
    iv_u = eval_interval(u, Box.from_bounds([[-2, 2], [-2, 2], [-1.6, 1.6]]))
    assert math.isfinite(iv_u.lo) and math.isfinite(iv_u.hi)


def test_interval_outward_rounding_strict():
    e = Add(Var(0), Const(0.1))
    iv = eval_interval(e, Box.from_bounds([[0.2, 0.2]]))
    v = 0.2 + 0.1
    assert iv.lo < v < iv.hi


def test_interval_soundness_many_random_pairs():
    # enclosure must contain every sampled value of the expression
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(1000):
        e = random_expr(rng, 2, int(rng.integers(1, 5)))
        centre = rng.uniform(-2, 2, size=2)
        half = rng.uniform(0.0, 1.5, size=2)
        lo, hi = centre - half, centre + half
        try:
            iv = eval_interval(e, Box.from_bounds(np.stack([lo, hi], axis=1)))
        except EnclosureError:
            continue
        pts = rng.uniform(lo, hi, size=(100, 2))
        vals = eval_batch(e, pts)
        finite = np.isfinite(vals)
        assert np.all(vals[finite] >= iv.lo) and np.all(vals[finite] <= iv.hi)
        checked += 1
    assert checked > 500


def test_interval_batch_matches_scalar():
    rng = np.random.default_rng(8)
    e = parse_expr("sin(x) * y + x^3 - exp(y)", XY)
    comp = CompiledExprs([e])
    los = rng.uniform(-2, 0, size=(50, 2))
    his = los + rng.uniform(0, 2, size=(50, 2))
    (blo, bhi, fail) = comp.eval_intervals(los, his)[0]
    assert fail is None
    for i in range(50):
        iv = eval_interval(e, Box.from_bounds(np.stack([los[i], his[i]], axis=1)))
        assert iv.lo == blo[i] and iv.hi == bhi[i]


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def test_differentiate_examples():
    rng = np.random.default_rng(9)
    pts = sample_points(rng, 100)
    d = differentiate(PowInt(Var(0), 3), 0)
    np.testing.assert_allclose(eval_batch(d, pts), 3 * pts[:, 0] ** 2, rtol=1e-14)
    d2 = differentiate(parse_expr("e^(-x)", XY), 0)
    np.testing.assert_allclose(eval_batch(d2, pts), -np.exp(-pts[:, 0]), rtol=1e-14)
    d3 = differentiate(Tanh(Var(0)), 0)
    np.testing.assert_allclose(eval_batch(d3, pts), 1 - np.tanh(pts[:, 0]) ** 2, rtol=1e-13)


def test_differentiate_matches_central_differences():
    rng = np.random.default_rng(10)
    h = 1e-5
    checked = 0
    for _ in range(150):
        e = random_expr(rng, 2, int(rng.integers(1, 4)), allow_div=False)
        var = int(rng.integers(2))
        d = differentiate(e, var)
        pts = rng.uniform(-1.5, 1.5, size=(20, 2))
        up = pts.copy()
        dn = pts.copy()
        up[:, var] += h
        dn[:, var] -= h
        fd = (eval_batch(e, up) - eval_batch(e, dn)) / (2 * h)
        sym = eval_batch(d, pts)
        vals = eval_batch(e, pts)
        ok = np.isfinite(fd) & np.isfinite(sym) & (np.abs(vals) < 1e3)
        if not np.any(ok):
            continue
        assert np.all(np.abs(fd[ok] - sym[ok]) <= 1e-4 * (1.0 + np.abs(sym[ok])))
        checked += 1
    assert checked > 100


def test_lie_derivative_darboux_oracle():
    # hand expansion: 2x(y+2xy) + 2y(-x+2x^2-y^2) = 8x^2 y - 2y^3
    B = Add(PowInt(Var(0), 2), PowInt(Var(1), 2))
    ld = lie_derivative(B, DARBOUX_FIELD)
    rng = np.random.default_rng(11)
    pts = sample_points(rng, 500)
    want = 8 * pts[:, 0] ** 2 * pts[:, 1] - 2 * pts[:, 1] ** 3
    np.testing.assert_allclose(eval_batch(ld, pts), want, rtol=1e-12, atol=1e-12)


def test_lie_derivative_identity_component():
    ld = lie_derivative(Var(0), DARBOUX_FIELD)
    rng = np.random.default_rng(12)
    pts = sample_points(rng, 100)
    np.testing.assert_allclose(eval_batch(ld, pts), eval_batch(DARBOUX_FIELD[0], pts))


def test_lie_derivative_matches_flow_derivative():
    # d/dt B(x(t)) along an RK4 trajectory must match the Lie derivative
    B = parse_expr("x^2 + y^2", XY)
    ld = lie_derivative(B, DARBOUX_FIELD)
    f = lambda p: np.array([eval_point(c, p) for c in DARBOUX_FIELD])
    x = np.array([0.5, 1.5])
    dt = 1e-3
    traj = [x.copy()]
    for _ in range(200):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        traj.append(x.copy())
    traj = np.array(traj)
    bvals = eval_batch(B, traj)
    fd = (bvals[2:] - bvals[:-2]) / (2 * dt)
    lie = eval_batch(ld, traj[1:-1])
    rel = np.abs(fd - lie) / (1.0 + np.abs(lie))
    assert np.max(rel) < 1e-3


# ---------------------------------------------------------------------------
# simplify
# ---------------------------------------------------------------------------


def test_simplify_constant_folding():
    e = Mul(Mul(Const(2.0), Const(3.0)), Var(0))
    s = simplify(e)
    assert isinstance(s, Mul) and isinstance(s.left, Const) and s.left.value == 6.0
    assert isinstance(simplify(Add(Var(0), Const(0.0))), Var)
    assert isinstance(simplify(Mul(Const(1.0), Var(0))), Var)
    z = simplify(Mul(Const(0.0), Sin(Var(0))))
    assert isinstance(z, Const) and z.value == 0.0
    c = simplify(Sin(Const(0.0)))
    assert isinstance(c, Const) and c.value == 0.0


def test_simplify_pointwise_agreement():
    rng = np.random.default_rng(13)
    for _ in range(200):
        e = random_expr(rng, 2, int(rng.integers(1, 6)))
        s = simplify(e)
        pts = rng.uniform(-2, 2, size=(50, 2))
        a = eval_batch(e, pts)
        b = eval_batch(s, pts)
        ok = np.isfinite(a) & np.isfinite(b)
        assert np.all(np.abs(a[ok] - b[ok]) <= 1e-9 * (1.0 + np.abs(a[ok])))


def test_free_variables_and_degree():
    e = parse_expr("-x + 2*x^2 - y^2", XY)
    assert free_variables(e) == {0, 1}
    assert polynomial_degree(e) == 2
    assert polynomial_degree(PowInt(Add(PowInt(Var(0), 2), Var(1)), 2)) == 4
    assert polynomial_degree(Sin(Var(0))) is None
    assert polynomial_degree(Div(Var(0), Const(2.0))) == 1
    assert polynomial_degree(Div(Var(0), Var(1))) is None
