import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import level_point
from podex import models
from podex.flow import integrate
from podex.subjets import (TOP, AxisMarginError, ChartMismatchError, CurveJet, align_jets,
                           dense_isolation_check, find_intersections, isolation_radius, jet_derivative_bound,
                           orbit_taylor, project_jet, tangency_order)


def _line_jet(theta, k=4):
    return project_jet(models.flat(2), [0, 0, math.cos(theta), math.sin(theta)], k)


def test_flat_horizontal_line_has_zero_jet():
    j = _line_jet(0.0)
    assert j.axis == 0
    assert np.all(j.all_coeffs == 0)


def test_flat_tilted_line():
    j = _line_jet(0.3)
    assert j.axis == 0
    assert j.all_coeffs[1, 0] == pytest.approx(math.tan(0.3), abs=1e-14)
    assert np.allclose(j.all_coeffs[2:], 0, atol=1e-14)


@pytest.mark.parametrize("B", [0.2, 0.5, 1.0])
def test_magnetic_orbit_is_circle_of_radius_one_over_B(B):
    # y(x) = -(R - sqrt(R^2 - x^2)) with R = 1/B: y'' = -B, y''' = 0, y'''' = -3 B^3
    j = project_jet(models.magnetic(2, field=B), [0, 0, 1, 0], 4)
    assert np.allclose(j.all_coeffs[:, 0], [0, 0, -B, 0, -3 * B ** 3], atol=1e-13)


def test_pendulum_second_taylor_coefficient():
    H = models.pendulum(2)
    z0 = level_point(H, [0.7, 0.1], [1.0, 0.3])
    c = orbit_taylor(H, z0, 6)
    assert c[2, 0] == pytest.approx(math.sin(0.7) / 2, abs=1e-14)


def test_truncation_consistency():
    H = models.perturbed_metric(2)
    z0 = level_point(H, [0.2, 0.1], [0.8, 0.6])
    assert np.allclose(orbit_taylor(H, z0, 6), orbit_taylor(H, z0, 8)[:7], atol=1e-13, rtol=0)


@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(-1.2, 1.2), st.integers(1, 4))
def test_jets_ignore_parametrization(q1, q2, phi, k):
    H = models.perturbed_metric(2)
    z0 = level_point(H, [q1, q2], [math.cos(phi), math.sin(phi)])
    gH = H.scaled("1 + 0.3*sin(q1)")
    a, b = project_jet(H, z0, k), project_jet(gH, z0, k)
    assert a.axis == b.axis
    assert np.allclose(a.all_coeffs, b.all_coeffs, atol=1e-9, rtol=0)


@pytest.mark.parametrize("n, k", [(2, 1), (2, 4), (3, 2), (4, 3)])
def test_jet_coordinate_count(n, k):
    z = np.zeros(2 * n)
    z[n] = 1.0
    j = project_jet(models.flat(n), z, k)
    assert j.coordinate_count == 1 + (n - 1) * (k + 1) == j.coordinates().size


def test_tangency_order_examples():
    a, b = _line_jet(0.0), _line_jet(0.3)
    assert tangency_order(a, b) == 1 == tangency_order(b, a)
    assert tangency_order(a, a) == TOP
    cubic = CurveJet.from_graph(0, 0.0, [[0.0], [0.0], [0.0], [6.0], [0.0]])
    assert tangency_order(a, cubic) == 3 == tangency_order(cubic, a)


@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_tangency_order_is_symmetric(c1, c2):
    a = CurveJet.from_graph(0, 0.0, np.array(c1)[:, None])
    b = CurveJet.from_graph(0, 0.0, np.array(c2)[:, None])
    assert tangency_order(a, b) == tangency_order(b, a)


def test_tangency_order_incomparable_and_mismatch():
    a = CurveJet.from_graph(0, 0.0, [[0.0], [1.0]])
    b = CurveJet.from_graph(0, 0.5, [[0.0], [1.0]])
    assert tangency_order(a, b) == -1
    with pytest.raises(ChartMismatchError):
        tangency_order(a, CurveJet.from_graph(1, 0.0, [[0.0], [1.0]]))


def test_axis_margin_and_alignment_rejections():
    with pytest.raises(AxisMarginError):
        project_jet(models.flat(2), [0, 0, 1, 0], 2, axis=1)
    with pytest.raises(ChartMismatchError):
        align_jets(models.flat(2), [0, 0, 1, 0], [0, 0, 0, 1], 2)


def test_isolation_radius_linear_dominates_quadratic():
    # y2 = x + x^2/2 vanishes at 0 and -2 only
    j1 = CurveJet.from_graph(0, 0.0, [[0.0], [0.0], [0.0]])
    j2 = CurveJet.from_graph(0, 0.0, [[0.0], [1.0], [1.0]])
    eps = isolation_radius(j1, j2, 1, 1.0)
    assert eps > 0
    x = np.linspace(-eps, eps, 10001)
    x = x[(x != 0) & (np.abs(x) < eps)]
    assert np.all(np.abs(x + x ** 2 / 2) > 1e-8)


def test_isolation_radius_order_zero():
    j1 = CurveJet.from_graph(0, 0.0, [[0.0], [0.0]])
    j2 = CurveJet.from_graph(0, 0.0, [[0.3], [1.0]])
    eps = isolation_radius(j1, j2, 0, 2.0)
    x = np.linspace(-eps, eps, 10001)
    assert eps > 0 and np.all(np.abs(0.3 + x) > 0)


def test_dense_isolation_on_crossing_geodesics():
    H = models.perturbed_metric(2)
    o1 = integrate(H, level_point(H, [-1, 0], [1, 0]), (0, 2.5))
    o2 = integrate(H, level_point(H, [0, -1], [0.6, 0.8]), (0, 2.5))
    (it,) = find_intersections(o1, o2)
    assert it.distance <= 1e-9
    j1, j2 = align_jets(H, o1.evaluate(it.t1), o2.evaluate(it.t2), 3)
    r = tangency_order(j1, j2)
    assert r == 1
    M = jet_derivative_bound(H, np.vstack([o1.evaluate(it.t1), o2.evaluate(it.t2)]), j1.axis, r + 1)
    eps = isolation_radius(j1, j2, r, M, window=1.0)
    rep = dense_isolation_check(o1, o2, it.t1, it.t2, j1, j2, r, eps, 10000)
    assert eps > 0 and rep["isolated"] and rep["samples"] >= 9999


def test_find_intersections_on_lines():
    H = models.flat(2)
    a = integrate(H, [-1, 0, 1, 0], (0, 2))
    b = integrate(H, [0, -1, 0.6, 0.8], (0, 2))
    (it,) = find_intersections(a, b)
    assert np.allclose(it.point, [0.75, 0], atol=1e-12)
    assert it.t1 == pytest.approx(1.75) and it.t2 == pytest.approx(1.25)
    c = integrate(H, [-1, 1, 1, 0], (0, 2))
    assert find_intersections(a, c) == []


def test_jet_record_roundtrip():
    j = _line_jet(0.3, 3)
    again = CurveJet.from_record(j.to_record())
    assert again.axis == j.axis and np.array_equal(again.all_coeffs, j.all_coeffs)
