"""Tests for regions, models, sampling and simulation."""

import math

import numpy as np
import pytest

from bcsynth.expr import Box, ParseError, parse_expr
from bcsynth.model import (
    TRUE_REGION,
    Atom,
    CompiledRegion,
    Mode,
    ModeError,
    ModelError,
    RegionAnd,
    RegionEmptyError,
    RegionOr,
    SystemModel,
    active_mode,
    field_at,
    load_problem,
    mode_of_batch,
    model_from_dict,
    model_to_dict,
    parse_region,
    print_region,
    sample_region,
    save_problem,
    simulate,
    simulate_batch,
    validate_model,
)

V2 = ("x", "y")


def box2(a=2.0):
    return Box.from_bounds([(-a, a), (-a, a)])


def single_mode_model(fx, fy, domain="true", init="x <= 0", unsafe="1 <= x", bb=2.0):
    m = SystemModel(
        variables=V2,
        bounding_box=box2(bb),
        domain=parse_region(domain, V2),
        init=parse_region(init, V2),
        unsafe=parse_region(unsafe, V2),
        modes=(Mode(TRUE_REGION, (parse_expr(fx, V2), parse_expr(fy, V2))),),
    )
    return m


def hybrid_model():
    return SystemModel(
        variables=V2,
        bounding_box=box2(),
        domain=parse_region("true", V2),
        init=parse_region("(x + 1)^2 + y^2 <= 0.09", V2),
        unsafe=parse_region("(x - 1.5)^2 + y^2 <= 0.04", V2),
        modes=(
            Mode(parse_region("x < 0", V2), (parse_expr("y", V2), parse_expr("-x - 0.5*x^3", V2))),
            Mode(parse_region("x >= 0", V2), (parse_expr("y", V2), parse_expr("x - 0.25*y^2", V2))),
        ),
    )


# ---------------------------------------------------------------------------
# Region parsing and printing
# ---------------------------------------------------------------------------


class TestRegionParse:
    def test_comparison_forms_agree_pointwise(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-3, 3, size=(500, 2))
        pairs = [
            ("x <= 1", lambda x, y: x <= 1),
            ("x < 1", lambda x, y: x < 1),
            ("x >= 1", lambda x, y: x >= 1),
            ("x > 1", lambda x, y: x > 1),
            ("x + y^2 <= 0", lambda x, y: x + y * y <= 0),
            ("x^2 + y^2 = 1", lambda x, y: abs(x * x + y * y - 1) <= 1e-12),
            ("x <= y", lambda x, y: x <= y),
        ]
        for text, pred in pairs:
            r = CompiledRegion(parse_region(text, V2))
            got = r.contains(X)
            want = np.array([pred(x, y) for x, y in X])
            assert np.array_equal(got, want), text

    def test_and_or_precedence(self):
        # and binds tighter: a or b and c == a or (b and c)
        r = parse_region("x <= 0 or 1 <= x and y <= 0", V2)
        c = CompiledRegion(r)
        assert c.contains(np.array([[-1.0, 5.0]]))[0]
        assert c.contains(np.array([[2.0, -1.0]]))[0]
        assert not c.contains(np.array([[2.0, 1.0]]))[0]
        assert not c.contains(np.array([[0.5, -1.0]]))[0]

    def test_region_parens_override_precedence(self):
        r = parse_region("(x <= 0 or 1 <= x) and y <= 0", V2)
        c = CompiledRegion(r)
        assert c.contains(np.array([[-1.0, -1.0]]))[0]
        assert not c.contains(np.array([[-1.0, 1.0]]))[0]

    def test_expression_parens_are_not_region_parens(self):
        r = parse_region("(x + 1)^2 + y^2 <= 0.25", V2)
        c = CompiledRegion(r)
        assert c.contains(np.array([[-1.0, 0.0]]))[0]
        assert not c.contains(np.array([[0.0, 0.0]]))[0]

    def test_fully_parenthesised_comparison(self):
        r = parse_region("((x) <= (1))", V2)
        c = CompiledRegion(r)
        assert c.contains(np.array([[0.5, 0.0]]))[0]
        assert not c.contains(np.array([[1.5, 0.0]]))[0]

    def test_true_keyword(self):
        r = parse_region("true", V2)
        assert r == TRUE_REGION
        assert CompiledRegion(r).contains(np.zeros((3, 2))).all()

    def test_strictness_at_boundary(self):
        X = np.array([[1.0, 0.0]])
        assert CompiledRegion(parse_region("x <= 1", V2)).contains(X)[0]
        assert not CompiledRegion(parse_region("x < 1", V2)).contains(X)[0]
        assert CompiledRegion(parse_region("x >= 1", V2)).contains(X)[0]
        assert not CompiledRegion(parse_region("x > 1", V2)).contains(X)[0]

    @pytest.mark.parametrize(
        "bad",
        ["", "x", "x <= ", "<= 0", "x <= 0 <= y", "x == 0", "(x <= 0", "x <= 0 and", "x ! 0"],
    )
    def test_malformed_rejected(self, bad):
        with pytest.raises(ParseError):
            parse_region(bad, V2)

    def test_print_roundtrip(self):
        texts = [
            "x + y^2 <= 0",
            "x < 0 or (x >= 0 and y = 0)",
            "true",
            "(x <= 0 or y <= 0) and x^2 + y^2 <= 4",
        ]
        rng = np.random.default_rng(1)
        X = rng.uniform(-3, 3, size=(400, 2))
        for t in texts:
            r1 = parse_region(t, V2)
            r2 = parse_region(print_region(r1, V2), V2)
            m1 = CompiledRegion(r1).contains(X)
            m2 = CompiledRegion(r2).contains(X)
            assert np.array_equal(m1, m2), t

    def test_nonfinite_values_are_outside(self):
        # division blowing up must never count as membership
        r = CompiledRegion(parse_region("1 / x <= 0", V2))
        assert not r.contains(np.array([[0.0, 0.0]]))[0]


class TestRegionPossible:
    def test_possible_is_sound_on_random_boxes(self):
        rng = np.random.default_rng(3)
        region = parse_region("x^2 + y^2 <= 1 or (x >= 1 and y >= 1)", V2)
        c = CompiledRegion(region)
        violations = 0
        for _ in range(300):
            lo = rng.uniform(-2, 2, size=2)
            hi = lo + rng.uniform(0, 1.5, size=2)
            pts = rng.uniform(lo, hi, size=(64, 2))
            inside = c.contains(pts)
            poss = c.possible(lo[None, :], hi[None, :])[0]
            if inside.any() and not poss:
                violations += 1
        assert violations == 0

    def test_possible_rejects_clearly_disjoint_box(self):
        c = CompiledRegion(parse_region("x^2 + y^2 <= 1", V2))
        assert not c.possible(np.array([[5.0, 5.0]]), np.array([[6.0, 6.0]]))[0]
        assert c.possible(np.array([[0.0, 0.0]]), np.array([[0.5, 0.5]]))[0]

    def test_possible_equality_needs_zero_crossing(self):
        c = CompiledRegion(parse_region("x = 0", V2))
        assert c.possible(np.array([[-1.0, 0.0]]), np.array([[1.0, 1.0]]))[0]
        assert not c.possible(np.array([[0.5, 0.0]]), np.array([[1.0, 1.0]]))[0]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class TestSampling:
    def test_samples_land_in_region_and_are_deterministic(self):
        m = hybrid_model()
        a = sample_region(m, "init", 200, np.random.default_rng(5))
        b = sample_region(m, "init", 200, np.random.default_rng(5))
        assert np.array_equal(a, b)
        assert a.shape == (200, 2)
        assert m.contains("init", a).all()

    def test_different_seeds_differ(self):
        m = hybrid_model()
        a = sample_region(m, "init", 50, np.random.default_rng(1))
        b = sample_region(m, "init", 50, np.random.default_rng(2))
        assert not np.array_equal(a, b)

    def test_empty_region_raises(self):
        m = single_mode_model("y", "-x")
        with pytest.raises(RegionEmptyError):
            sample_region(m, parse_region("x >= 10", V2), 3, np.random.default_rng(0))

    def test_zero_count(self):
        m = single_mode_model("y", "-x")
        out = sample_region(m, "init", 0, np.random.default_rng(0))
        assert out.shape == (0, 2)

    def test_uniformity_over_halves(self):
        # left and right halves of a symmetric region get comparable mass
        m = single_mode_model("y", "-x", init="x^2 + y^2 <= 1")
        pts = sample_region(m, "init", 4000, np.random.default_rng(11))
        frac = float(np.mean(pts[:, 0] > 0))
        assert 0.45 < frac < 0.55


# ---------------------------------------------------------------------------
# Model validation
# ---------------------------------------------------------------------------


class TestValidation:
    def test_valid_models_pass(self):
        validate_model(hybrid_model())
        validate_model(single_mode_model("y", "-x"))

    def test_field_arity_mismatch(self):
        m = hybrid_model()
        bad = SystemModel(
            variables=m.variables,
            bounding_box=m.bounding_box,
            domain=m.domain,
            init=m.init,
            unsafe=m.unsafe,
            modes=(Mode(TRUE_REGION, (parse_expr("y", V2),)),),
        )
        with pytest.raises(ModelError):
            validate_model(bad)

    def test_init_outside_domain(self):
        m = single_mode_model("y", "-x", domain="x >= 0", init="x <= -1")
        with pytest.raises(ModelError, match="init"):
            validate_model(m)

    def test_guard_gap_detected(self):
        m = hybrid_model()
        gap = SystemModel(
            variables=m.variables,
            bounding_box=m.bounding_box,
            domain=m.domain,
            init=m.init,
            unsafe=m.unsafe,
            modes=(Mode(parse_region("x < 0", V2), m.modes[0].field),),
        )
        with pytest.raises(ModelError, match="cover"):
            validate_model(gap)

    def test_guard_overlap_detected(self):
        m = hybrid_model()
        overlap = SystemModel(
            variables=m.variables,
            bounding_box=m.bounding_box,
            domain=m.domain,
            init=m.init,
            unsafe=m.unsafe,
            modes=(Mode(TRUE_REGION, m.modes[0].field), Mode(TRUE_REGION, m.modes[1].field)),
        )
        with pytest.raises(ModelError, match="overlap"):
            validate_model(overlap)

    def test_variable_index_out_of_range(self):
        m = single_mode_model("y", "-x")
        bad = SystemModel(
            variables=("x",),
            bounding_box=Box.from_bounds([(-2, 2)]),
            domain=parse_region("true", ["x"]),
            init=parse_region("x <= 0", ["x"]),
            unsafe=parse_region("x >= 1", ["x"]),
            modes=(Mode(TRUE_REGION, (parse_expr("y", V2),)),),
        )
        with pytest.raises(ModelError):
            validate_model(bad)


# ---------------------------------------------------------------------------
# Mode selection
# ---------------------------------------------------------------------------


class TestModes:
    def test_active_mode_unique(self):
        m = hybrid_model()
        assert active_mode(m, [-1.0, 0.0]) == 0
        assert active_mode(m, [1.0, 1.0]) == 1
        # x = 0 satisfies only the closed guard of the second mode
        assert active_mode(m, [0.0, 0.0]) == 1

    def test_active_mode_gap_and_overlap(self):
        m = hybrid_model()
        gappy = SystemModel(
            variables=m.variables,
            bounding_box=m.bounding_box,
            domain=m.domain,
            init=m.init,
            unsafe=m.unsafe,
            modes=(Mode(parse_region("x < 0", V2), m.modes[0].field),),
        )
        with pytest.raises(ModeError):
            active_mode(gappy, [1.0, 0.0])
        overlapping = SystemModel(
            variables=m.variables,
            bounding_box=m.bounding_box,
            domain=m.domain,
            init=m.init,
            unsafe=m.unsafe,
            modes=(Mode(TRUE_REGION, m.modes[0].field), Mode(TRUE_REGION, m.modes[1].field)),
        )
        with pytest.raises(ModeError):
            active_mode(overlapping, [1.0, 0.0])

    def test_guard_partition_statistically(self):
        m = hybrid_model()
        rng = np.random.default_rng(13)
        X = rng.uniform(-2, 2, size=(10_000, 2))
        count = np.zeros(len(X), dtype=int)
        for mode in m.modes:
            count += m.compiled(mode.guard).contains(X).astype(int)
        assert np.all(count == 1)

    def test_mode_of_batch_matches_scalar(self):
        m = hybrid_model()
        rng = np.random.default_rng(17)
        X = rng.uniform(-2, 2, size=(100, 2))
        batch = mode_of_batch(m, X)
        scalar = np.array([active_mode(m, x) for x in X])
        assert np.array_equal(batch, scalar)

    def test_field_at_uses_active_mode(self):
        m = hybrid_model()
        X = np.array([[-1.0, 0.5], [1.0, 2.0]])
        F = field_at(m, X)
        # mode 0 at x=-1: (y, -x - 0.5 x^3) = (0.5, 1.5)
        assert F[0] == pytest.approx([0.5, 1.5])
        # mode 1 at x=1: (y, x - 0.25 y^2) = (2.0, 0.0)
        assert F[1] == pytest.approx([2.0, 0.0])


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


class TestSimulate:
    def test_linear_decay_endpoint(self):
        # dx/dt = -x from 1.0 gives exp(-1) = 0.36787944117144233 at t = 1
        m = SystemModel(
            variables=("x",),
            bounding_box=Box.from_bounds([(-2, 2)]),
            domain=parse_region("true", ["x"]),
            init=parse_region("x <= 1", ["x"]),
            unsafe=parse_region("x >= 2", ["x"]),
            modes=(Mode(TRUE_REGION, (parse_expr("-x", ["x"]),)),),
        )
        t = simulate(m, [1.0], 0.01, 100)
        assert t.points.shape == (101, 1)
        assert abs(t.points[-1, 0] - 0.36787944117144233) < 1e-4
        assert not t.exited and not t.divergent

    def test_fourth_order_convergence(self):
        m = SystemModel(
            variables=("x",),
            bounding_box=Box.from_bounds([(-4, 4)]),
            domain=parse_region("true", ["x"]),
            init=parse_region("x <= 1", ["x"]),
            unsafe=parse_region("x >= 4", ["x"]),
            modes=(Mode(TRUE_REGION, (parse_expr("-x", ["x"]),)),),
        )
        exact = math.exp(-1.0)
        e1 = abs(simulate(m, [1.0], 0.1, 10).points[-1, 0] - exact)
        e2 = abs(simulate(m, [1.0], 0.05, 20).points[-1, 0] - exact)
        assert 12.0 < e1 / e2 < 20.0

    def test_oscillator_energy_preserved(self):
        m = single_mode_model("y", "-x", bb=3.0)
        t = simulate(m, [1.0, 0.0], 0.01, 2000)
        energy = t.points[:, 0] ** 2 + t.points[:, 1] ** 2
        assert np.max(np.abs(energy - 1.0)) < 1e-6

    def test_hybrid_switching(self):
        m = hybrid_model()
        t = simulate(m, [-0.1, 1.0], 0.01, 300)
        modes = mode_of_batch(m, t.points)
        assert modes[0] == 0
        assert 1 in modes  # the state crosses into x >= 0

    def test_bounding_box_exit_truncates(self):
        m = single_mode_model("1", "0")
        t = simulate(m, [1.5, 0.0], 0.1, 50)
        assert t.exited and not t.divergent
        assert len(t.points) < 51
        assert np.all(t.points[:, 0] <= 2.0)

    def test_divergence_flag(self):
        m = SystemModel(
            variables=("x",),
            bounding_box=Box.from_bounds([(-1e308, 1e308)]),
            domain=parse_region("true", ["x"]),
            init=parse_region("x <= 1", ["x"]),
            unsafe=parse_region("x >= 1e307", ["x"]),
            modes=(Mode(TRUE_REGION, (parse_expr("x^3", ["x"]),)),),
        )
        t = simulate(m, [1e150, 0.0][:1], 0.1, 10)
        assert t.divergent
        assert np.all(np.isfinite(t.points))

    def test_zero_steps(self):
        m = single_mode_model("y", "-x")
        t = simulate(m, [0.5, 0.5], 0.01, 0)
        assert t.points.shape == (1, 2)
        assert np.array_equal(t.points[0], [0.5, 0.5])

    def test_start_outside_domain_rejected(self):
        m = single_mode_model("y", "-x", domain="x <= 0")
        with pytest.raises(ModelError):
            simulate(m, [1.0, 0.0], 0.01, 10)

    def test_batch_matches_single(self):
        m = hybrid_model()
        X0 = np.array([[-0.5, 0.2], [0.5, -0.2], [-1.0, 0.0]])
        pts, exited, divergent, lengths = simulate_batch(m, X0, 0.01, 100)
        for i in range(3):
            t = simulate(m, X0[i], 0.01, 100)
            assert np.array_equal(t.points, pts[: lengths[i], i, :])
            assert t.exited == exited[i]
            assert t.divergent == divergent[i]


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------


class TestProblemFiles:
    def test_roundtrip_preserves_semantics(self, tmp_path):
        m = hybrid_model()
        p = tmp_path / "prob.yaml"
        save_problem(m, str(p))
        m2 = load_problem(str(p))
        assert m2.variables == m.variables
        assert m2.dimension == 2
        assert len(m2.modes) == 2
        rng = np.random.default_rng(23)
        X = rng.uniform(-2, 2, size=(500, 2))
        for which in ("domain", "init", "unsafe"):
            assert np.array_equal(m.contains(which, X), m2.contains(which, X))
        assert np.array_equal(mode_of_batch(m, X), mode_of_batch(m2, X))
        F1 = field_at(m, X)
        F2 = field_at(m2, X)
        assert np.array_equal(F1, F2)

    def test_missing_key_rejected(self):
        doc = model_to_dict(hybrid_model())
        del doc["unsafe"]
        with pytest.raises(ModelError, match="unsafe"):
            model_from_dict(doc)

    def test_reserved_variable_name_rejected(self):
        doc = model_to_dict(hybrid_model())
        doc["variables"] = ["e", "y"]
        with pytest.raises(ModelError, match="variable"):
            model_from_dict(doc)

    def test_dimension_mismatch_rejected(self):
        doc = model_to_dict(hybrid_model())
        doc["dimension"] = 3
        with pytest.raises(ModelError):
            model_from_dict(doc)
