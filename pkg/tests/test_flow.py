import numpy as np
import pytest

from conftest import level_point
from podex import models
from podex.flow import FlowError, integrate, shoot_chord
from podex.hamsys import HamiltonianModel


def test_straight_line():
    o = integrate(models.flat(2), [0, 0, 1, 0], (0, 2))
    assert np.allclose(o.z[-1], [2, 0, 1, 0], atol=1e-14)
    assert o.max_residual <= 1e-12
    assert np.all(np.diff(o.t) > 0)


def test_pendulum_drift_over_long_window():
    H = models.pendulum(2)
    z0 = level_point(H, [0.3, 0.0], [1.0, 0.4])
    o = integrate(H, z0, (0, 50))
    assert o.max_residual <= 1e-9
    assert np.max(np.abs(H.value(o.z))) <= 1e-9


def test_forward_backward_reversal():
    H = models.magnetic(2)
    z0 = level_point(H, [0.1, 0.2], [0.3, 1.0])
    fwd = integrate(H, z0, (0, 5))
    back = integrate(H, fwd.z[-1], (5, 0))
    assert np.allclose(back.z[0], z0, atol=1e-8)


def test_dense_output_reproduces_samples():
    H = models.perturbed_metric(2)
    o = integrate(H, level_point(H, [0, 0], [1, 1]), (0, 4))
    assert np.allclose(o.evaluate(o.t), o.z, atol=1e-12, rtol=0)
    mid = 0.5 * (o.t[:-1] + o.t[1:])
    assert np.max(np.abs(H.value(o.evaluate(mid)))) <= 1e-9


def test_periodic_wrap_only_touches_q():
    H = HamiltonianModel("(p1^2 + p2^2)/2 - 1/2", 2, periods=[2 * np.pi, 0])
    o = integrate(H, [3.0, 0, 1, 0], (0, 1))
    assert -np.pi <= o.z[-1, 0] < np.pi or 0 <= o.z[-1, 0] < 2 * np.pi
    assert np.allclose(o.z[-1, 2:], [1, 0])


def test_csv_columns():
    o = integrate(models.flat(2), [0, 0, 1, 0], (0, 1))
    header = o.to_csv().splitlines()[0]
    assert header == "t,q1,q2,p1,p2,energy_residual"


@pytest.mark.parametrize("q_b, p, T", [((1, 0), (1, 0), 1.0), ((0, 1), (0, 1), 1.0)])
def test_flat_chords(q_b, p, T):
    ch = shoot_chord(models.flat(2), np.zeros(2), np.array(q_b, float), np.array([0.8, 0.6]), 1.3)
    assert np.allclose(ch.p_start, p, atol=1e-9)
    assert ch.duration == pytest.approx(T, abs=1e-9)


def test_perturbed_chord_reintegrates():
    H = models.perturbed_metric(2)
    ch = shoot_chord(H, np.zeros(2), np.array([1.0, 0.0]), np.array([1.0, 0.0]), 1.0)
    assert ch.residual <= 1e-8
    again = integrate(H, ch.orbit.z[0], (0, ch.duration))
    assert np.allclose(again.z[-1, :2], [1, 0], atol=1e-8)


def test_flow_error_on_drift_tolerance():
    H = models.pendulum(2)
    with pytest.raises(FlowError):
        integrate(H, level_point(H, [0, 0], [1, 0]), (0, 5), drift_tol=1e-30)


def _polyline_distance(pts, line):
    """Distance from each point to the polyline through ``line`` (nearest vertex's two segments)."""
    from scipy.spatial import cKDTree
    _, idx = cKDTree(line).query(pts)
    best = np.full(len(pts), np.inf)
    for off in (-1, 0):
        i = np.clip(idx + off, 0, len(line) - 2)
        a, b = line[i], line[i + 1]
        ab = b - a
        t = np.clip(np.sum((pts - a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0, 1)
        best = np.minimum(best, np.linalg.norm(pts - a - t[:, None] * ab, axis=1))
    return best


@pytest.mark.parametrize("g", ["1 + 0.3*sin(q1)", "exp(0.2*q2)*(1 + p1^2)"])
def test_reparametrized_orbits_share_point_set(g):
    H = models.perturbed_metric(2)
    z0 = level_point(H, [0.1, -0.2], [1.0, 0.5])
    gH = H.scaled(g)
    a = integrate(H, z0, (0, 3))
    b = integrate(gH, z0, (0, 6))
    ta = np.linspace(0, 3, 3001)
    qa = a.base_path(ta)
    qb = b.base_path(np.linspace(0, 6, 6001))
    # restrict the longer orbit to the arclength window covered by the first
    L = np.sum(np.linalg.norm(np.diff(qa, axis=0), axis=1))
    sb = np.concatenate([[0], np.cumsum(np.linalg.norm(np.diff(qb, axis=0), axis=1))])
    qb = qb[sb <= L - 1e-3]
    assert np.max(_polyline_distance(qb, a.base_path(np.linspace(0, 3, 30001)))) <= 1e-6
