"""Pointwise nonlinearity values, derivatives, and FD cross-checks."""

import numpy as np
import numpy.testing as npt
import pytest

from corrfield.grids import Field, GridSpace
from corrfield.nonlinearity import (
    apply,
    builtin,
    builtin_labels,
    check_monotone,
    derivative,
    piecewise_polynomial,
)


def central_diff(fn, x, h=1e-6):
    return (fn.eval(x + h) - fn.eval(x - h)) / (2 * h)


class TestBuiltins:
    def test_labels(self):
        assert set(builtin_labels()) == {
            "identity",
            "exponential",
            "deadzone_quadratic",
            "tanh",
        }

    def test_unknown_label(self):
        with pytest.raises(ValueError, match="unknown nonlinearity"):
            builtin("cubic")

    def test_identity(self):
        f = builtin("identity")
        x = np.linspace(-3, 3, 7)
        npt.assert_array_equal(f.eval(x), x)
        npt.assert_array_equal(f.deriv(x), np.ones(7))

    def test_exponential(self):
        f = builtin("exponential")
        x = np.array([-1.0, 0.0, 2.0])
        npt.assert_allclose(f.eval(x), np.exp(x))
        npt.assert_allclose(f.deriv(x), np.exp(x))

    def test_deadzone_quadratic_pinned_values(self):
        f = builtin("deadzone_quadratic")
        # left branch: x - 1
        assert f.eval(np.array([-2.0]))[0] == pytest.approx(-3.0)
        assert f.deriv(np.array([-1.0]))[0] == pytest.approx(1.0)
        # dead zone: exactly zero with zero slope
        npt.assert_array_equal(f.eval(np.array([0.1, 0.25, 0.49])), 0.0)
        npt.assert_array_equal(f.deriv(np.array([0.1, 0.25, 0.49])), 0.0)
        # quadratic branch: x^2 - x + 1/4
        assert f.eval(np.array([2.0]))[0] == pytest.approx(2.25)
        assert f.deriv(np.array([2.0]))[0] == pytest.approx(3.0)
        assert f.eval(np.array([0.5]))[0] == pytest.approx(0.0)

    def test_deadzone_branch_boundaries(self):
        f = builtin("deadzone_quadratic")
        eps = 1e-9
        # upward jump at 0: limit from the left is -1, value at 0 is 0
        assert f.eval(np.array([-eps]))[0] == pytest.approx(-1.0, abs=1e-8)
        assert f.eval(np.array([0.0]))[0] == 0.0
        # continuous at 1/2
        assert f.eval(np.array([0.5 - eps]))[0] == pytest.approx(0.0, abs=1e-8)
        assert f.eval(np.array([0.5 + eps]))[0] == pytest.approx(0.0, abs=1e-8)

    def test_deadzone_derivative_placeholder_at_zero(self):
        f = builtin("deadzone_quadratic")
        assert f.deriv(np.array([0.0]))[0] == 1.0

    def test_tanh_fd(self):
        f = builtin("tanh")
        x = np.linspace(-4, 4, 100)
        npt.assert_allclose(f.deriv(x), central_diff(f, x), atol=1e-8)

    def test_deadzone_fd_away_from_kinks(self):
        f = builtin("deadzone_quadratic")
        rng = np.random.default_rng(0)
        x = rng.uniform(-5, 5, 1000)
        # keep a safe distance from the kinks at 0 and 1/2
        x = x[(np.abs(x) > 1e-3) & (np.abs(x - 0.5) > 1e-3)]
        npt.assert_allclose(f.deriv(x), central_diff(f, x), atol=1e-5)

    @pytest.mark.parametrize("label", ["identity", "exponential", "deadzone_quadratic", "tanh"])
    def test_monotone_non_decreasing(self, label):
        f = builtin(label)
        rng = np.random.default_rng(42)
        a = rng.uniform(-6, 6, 1000)
        b = a + rng.uniform(0, 3, 1000)
        assert np.all(f.eval(b) - f.eval(a) >= -1e-12)
        check_monotone(f, -6, 6)

    def test_field_level_helpers(self):
        g = GridSpace((4,))
        f = builtin("exponential")
        x = Field(g, np.array([0.0, 1.0, -1.0, 2.0]))
        npt.assert_allclose(apply(f, x).values, np.exp(x.values))
        npt.assert_allclose(derivative(f, x).values, np.exp(x.values))
        assert apply(f, x).space == g


class TestPiecewisePolynomial:
    def test_matches_deadzone_when_configured(self):
        f = piecewise_polynomial(
            [0.0, 0.5], [[1.0, -1.0], [0.0], [1.0, -1.0, 0.25]], label="custom"
        )
        ref = builtin("deadzone_quadratic")
        x = np.linspace(-3, 3, 601)
        x = x[(np.abs(x) > 1e-9)]  # derivative at the kink is a placeholder
        npt.assert_allclose(f.eval(x), ref.eval(x), atol=1e-12)
        npt.assert_allclose(f.deriv(x), ref.deriv(x), atol=1e-12)

    def test_rejects_non_monotone(self):
        with pytest.raises(ValueError, match="not monotone"):
            piecewise_polynomial([0.0], [[1.0, 0.0], [-1.0, 0.0]])

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            piecewise_polynomial([1.0, 0.0], [[1, 0], [1, 0], [1, 0]])
        with pytest.raises(ValueError):
            piecewise_polynomial([0.0], [[1, 0]])
