import numpy as np
import pytest

from anisoplap.expr import ExprError, parse

PTS = np.array([[0.5, -1.0], [0.0, 2.0], [3.0, 4.0]])


@pytest.mark.parametrize("text,expected", [
    ("1", [1.0, 1.0, 1.0]),
    ("x + 2*y", [-1.5, 4.0, 11.0]),
    ("x^2 - y**2", [-0.75, -4.0, -7.0]),
    ("-x^2", [-0.25, 0.0, -9.0]),
    ("2^3^2", [512.0] * 3),
    ("r", [np.sqrt(1.25), 2.0, 5.0]),
    ("|y| + abs(x)", [1.5, 2.0, 7.0]),
    ("cos(pi*x/2)*cos(pi*y/2)", np.cos(np.pi * PTS[:, 0] / 2) * np.cos(np.pi * PTS[:, 1] / 2)),
    ("exp(0) + sqrt(4) + log(1)", [3.0] * 3),
    ("1.5e1 / 3 - .5", [4.5] * 3),
])
def test_evaluation(text, expected):
    np.testing.assert_allclose(parse(text)(PTS), expected, rtol=1e-15, atol=1e-15)


def test_three_dimensional_variable():
    f = parse("z + x")
    np.testing.assert_allclose(f(np.array([[1.0, 2.0, 3.0]])), [4.0])
    with pytest.raises(ExprError):
        f(PTS)


@pytest.mark.parametrize("text", ["", "1 +", "(x", "foo(x)", "x $ y", "sin x", "|x", "w"])
def test_malformed(text):
    with pytest.raises(ExprError):
        parse(text)


def test_is_value_error():
    assert issubclass(ExprError, ValueError)
