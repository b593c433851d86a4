import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from podex import expr as ex
from podex.hamsys import HamiltonianModel


def test_parse_roundtrip_interns():
    e = ex.parse("sin(q1)*p1^2 + exp(-q2)/2")
    assert ex.parse(ex.to_string(e)) is e
    assert ex.parse("q1**2") is ex.parse("q1^2")


def test_parse_error_reports_position():
    with pytest.raises(ex.ParseError) as info:
        ex.parse("p1 + * 2")
    assert info.value.position == 6
    with pytest.raises(ex.ParseError, match="unknown function"):
        ex.parse("foo(p1)")
    with pytest.raises(ex.ParseError, match="unknown variable"):
        HamiltonianModel("q1 + r", 2)


def test_domain_error_in_strict_mode():
    H = HamiltonianModel("log(q1) + p1 + p2", 2)
    with pytest.raises(ex.DomainError):
        H.value([-1.0, 0, 0, 0], strict=True)
    assert math.isnan(H.value([-1.0, 0, 0, 0]))


def test_symbolic_derivative():
    e = ex.parse("sin(q1)*p1^2")
    assert ex.diff(e, "q1") is ex.parse("cos(q1)*p1^2")
    assert ex.diff(e, "q2") is ex.ZERO


def test_plateau_is_flat_on_both_ends():
    s = ex.var("s")
    H = HamiltonianModel(ex.substitute(ex.plateau(s), {"s": ex.var("q1")}) + 0 * ex.var("p1"), 2)
    vals = H.value(np.array([[0.2, 0, 0, 0], [0.5, 0, 0, 0], [0.75, 0, 0, 0], [1.0, 0, 0, 0], [3.0, 0, 0, 0]]))
    assert vals[0] == 1.0 and vals[1] == 1.0
    assert 0 < vals[2] < 1
    assert vals[3] == 0.0 and vals[4] == 0.0


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 2))
def test_gradient_matches_finite_differences(a, b, c):
    H = HamiltonianModel("exp(q1*p2/3)*sqrt(p1^2 + 1) + cos(q2)*p1^3", 2)
    z = np.array([a, b, c, 0.3])
    g = H.gradient(z)
    h = 1e-6
    fd = np.array([(H.value(z + h * e) - H.value(z - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-6)
