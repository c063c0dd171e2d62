import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from timedreach.expr import Expression, ExpressionError, split_vector


def test_precedence_and_power():
    assert Expression("1 + 2 * 3").constant_value() == 7
    assert Expression("2 ^ 3 ^ 2").constant_value() == 2 ** 9
    assert Expression("-2 ^ 2").constant_value() == -4
    assert Expression("(1 + 2) * 3").constant_value() == 9


def test_functions_and_constants():
    assert Expression("cos(pi)").constant_value() == pytest.approx(-1)
    assert Expression("max(1, 2, 3) + min(4, 5)").constant_value() == 7
    assert Expression("sqrt(abs(-16))").constant_value() == 4
    assert Expression("k * 2", constants={"k": 1.5}).constant_value() == 3


def test_vectorized_evaluation():
    e = Expression("v*cos(x3)", allowed={"x3"}, constants={"v": 2})
    theta = np.array([0.0, np.pi / 2, np.pi])
    np.testing.assert_allclose(e.evaluate({"x3": theta}), [2, 0, -2], atol=1e-12)


def test_unknown_identifier():
    with pytest.raises(ExpressionError, match="unknown identifier x2"):
        Expression("x2", allowed={"x1"})


@pytest.mark.parametrize("src", ["1 +", "(1", "sin 1", "1 $ 2", "foo(1)", ""])
def test_syntax_errors(src):
    with pytest.raises(ExpressionError):
        Expression(src)


def test_error_reports_column():
    with pytest.raises(ExpressionError) as info:
        Expression("1 + * 2")
    assert info.value.column is not None


def test_split_vector():
    assert split_vector("[v*cos(x3), v*sin(x3), u1]") == ["v*cos(x3)", "v*sin(x3)", "u1"]
    assert split_vector("[max(x1, 2), 0]") == ["max(x1, 2)", "0"]


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=5), st.floats(-3, 3))
def test_polynomial_matches_python(coeffs, x):
    src = " + ".join(f"({c})*x1^{i}" for i, c in enumerate(coeffs))
    expected = sum(c * x ** i for i, c in enumerate(coeffs))
    got = float(Expression(src, allowed={"x1"}).evaluate({"x1": x}))
    assert math.isclose(got, expected, rel_tol=1e-12, abs_tol=1e-12)
