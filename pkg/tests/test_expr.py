import numpy as np
import pytest

from curvlab import expr as ex


def grid_pts(n=41, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random(n), rng.random(n)


def fd_derivative(tree, var, x, y, h=1e-6):
    fn = ex.compile_expr(tree)
    if var == "x":
        return (fn(x + h, y) - fn(x - h, y)) / (2 * h)
    return (fn(x, y + h) - fn(x, y - h)) / (2 * h)


class TestParser:
    def test_example_and_symbolic_derivative(self):
        t = ex.parse_field("0.05*sin(2*pi*x)*sin(2*pi*y)")
        ref = ex.parse_field("0.05*2*pi*cos(2*pi*x)*sin(2*pi*y)")
        x, y = grid_pts()
        got = ex.evaluate(t.d("x"), x, y)
        want = ex.evaluate(ref, x, y)
        assert np.max(np.abs(got - want)) < 1e-14

    @pytest.mark.parametrize("source", ["x^2", "x**2"])
    def test_integer_power(self, source):
        t = ex.parse_field(source)
        assert ex.evaluate(t, np.array([3.0]), np.array([0.0]))[0] == 9.0

    def test_negative_power(self):
        t = ex.parse_field("(1 + x)^-1")
        assert ex.evaluate(t, np.array([1.0]), np.array([0.0]))[0] == 0.5

    def test_unary_minus(self):
        t = ex.parse_field("-x + 1")
        assert ex.evaluate(t, np.array([0.25]), np.array([0.0]))[0] == 0.75

    def test_syntax_error_position(self):
        with pytest.raises(ex.ExprError, match="position"):
            ex.parse_field("sin(2*pi*x")

    def test_unknown_identifier(self):
        with pytest.raises(ex.ExprError, match="unknown identifier"):
            ex.parse_field("3*z")

    def test_unknown_function(self):
        with pytest.raises(ex.ExprError, match="unknown function"):
            ex.parse_field("sinh(x)")

    def test_arity_mismatch(self):
        with pytest.raises(ex.ExprError, match="argument"):
            ex.parse_field("min(x)")

    def test_emit_round_trip(self):
        t = ex.parse_field("max(0, 0.04 - persq(x, y, 0.5, 0.5))^2")
        again = ex.parse_field(t.emit())
        x, y = grid_pts(seed=3)
        assert np.array_equal(ex.evaluate(t, x, y), ex.evaluate(again, x, y))


class TestDerivatives:
    @pytest.mark.parametrize("source", [
        "sin(2*pi*x)*cos(2*pi*y)",
        "exp(0.3*sin(2*pi*x))",
        "sqrt(1.5 + sin(2*pi*y))",
        "log(2 + cos(2*pi*x))",
        "persq(x, y, 0.5, 0.5)",
        "max(0, 0.04 - persq(x, y, 0.5, 0.5))^2",
        "bump((0.04 - persq(x, y, 0.3, 0.7)) / 0.04)",
    ])
    @pytest.mark.parametrize("var", ["x", "y"])
    def test_against_finite_differences(self, source, var):
        t = ex.parse_field(source)
        x, y = grid_pts(n=200, seed=7)
        sym = ex.compile_expr(t.d(var))(x, y)
        num = fd_derivative(t, var, x, y)
        assert np.max(np.abs(sym - num)) < 1e-5

    def test_second_derivative_jump_across_circle(self):
        # C^{1,1}: one-sided second derivatives differ across persq = r0^2
        t = ex.parse_field("max(0, 0.04 - persq(x, y, 0.5, 0.5))^2")
        d2 = t.d("x").d("x")
        fn = ex.compile_expr(d2)
        eps = 1e-7
        inner = fn(np.array([0.5 + 0.2 - eps]), np.array([0.5]))
        outer = fn(np.array([0.5 + 0.2 + eps]), np.array([0.5]))
        assert abs(inner[0] - outer[0]) > 0.1
        # but first derivatives are continuous there
        d1 = ex.compile_expr(t.d("x"))
        assert abs(d1(np.array([0.5 + 0.2 - eps]), np.array([0.5]))[0]
                   - d1(np.array([0.5 + 0.2 + eps]), np.array([0.5]))[0]) < 1e-6

    def test_abs_right_sided_at_zero(self):
        t = ex.parse_field("abs(x)")
        d = ex.compile_expr(t.d("x"))
        assert d(np.array([0.0]), np.array([0.0]))[0] == 1.0

    def test_min_max_tie_convention(self):
        # on ties both select the first argument's derivative
        tmin = ex.parse_field("min(x, x)").d("x")
        tmax = ex.parse_field("max(2*x, 2*x)").d("x")
        assert ex.compile_expr(tmin)(np.array([0.3]), np.array([0.0]))[0] == 1.0
        assert ex.compile_expr(tmax)(np.array([0.3]), np.array([0.0]))[0] == 2.0


class TestTorusPrimitives:
    def test_perdiff_wraps(self):
        t = ex.parse_field("perdiff(x, 0.9)")
        v = ex.compile_expr(t)(np.array([0.0, 0.8, 0.5]), np.zeros(3))
        assert np.allclose(v, [0.1, -0.1, -0.4])

    def test_persq_is_squared_distance(self):
        t = ex.parse_field("persq(x, y, 0.9, 0.9)")
        v = ex.compile_expr(t)(np.array([0.1]), np.array([0.1]))
        assert v[0] == pytest.approx(0.08, abs=1e-15)

    def test_bump_vanishes_left_of_zero(self):
        t = ex.parse_field("bump(x - 0.5)")
        fn = ex.compile_expr(t)
        v = fn(np.array([0.1, 0.5, 0.9]), np.zeros(3))
        assert v[0] == 0.0 and v[1] == 0.0 and v[2] > 0.0
        d = ex.compile_expr(t.d("x"))(np.array([0.1, 0.5, 0.9]), np.zeros(3))
        assert np.all(np.isfinite(d)) and d[0] == 0.0

    def test_bump_smooth_second_derivative(self):
        t = ex.parse_field("bump(x - 0.5)")
        d2 = ex.compile_expr(t.d("x").d("x"))
        v = d2(np.linspace(0, 1, 101), np.zeros(101))
        assert np.all(np.isfinite(v))


class TestPeriodicity:
    def test_linear_rejected(self):
        with pytest.raises(ex.ExprError, match="periodicity"):
            ex.check_periodicity(ex.parse_field("x"))

    def test_derivative_seam_detected(self):
        # periodic values but non-periodic slope
        with pytest.raises(ex.ExprError, match="periodicity"):
            ex.check_periodicity(ex.parse_field("sin(pi*x)^2 + x*(1-x)"))

    def test_trig_accepted(self):
        ex.check_periodicity(ex.parse_field("sin(2*pi*x)*cos(4*pi*y) + 1"))

    def test_kink_detection(self):
        assert ex.has_kinks(ex.parse_field("abs(sin(2*pi*x))"))
        assert ex.has_kinks(ex.parse_field("max(0, 0.04 - persq(x,y,0.5,0.5))^2"))
        assert not ex.has_kinks(ex.parse_field("sin(2*pi*x) + bump(y - 0.5)"))


class TestEvaluation:
    def test_tree_eval_matches_compiled(self):
        t = ex.parse_field("exp(0.1*cos(2*pi*x)) / (2 + sin(2*pi*y))")
        x, y = grid_pts(seed=11)
        assert np.allclose(t.ev(x, y), ex.compile_expr(t)(x, y), rtol=0, atol=0)

    def test_nonfinite_detected(self):
        t = ex.parse_field("log(sin(2*pi*x))")
        with pytest.raises(ex.ExprError, match="finite"):
            ex.evaluate(t, np.array([0.75]), np.array([0.0]))
