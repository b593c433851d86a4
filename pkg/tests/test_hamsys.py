import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import corpus
from podex import models
from podex.hamsys import (HamiltonianModel, OffLevelError, VerticalTangencyError, certify_level_point,
                          eval_ham, ham_vector_field)

CORPUS = corpus()


def _fd_partial(H, z, alpha, h=1e-3):
    """Central-difference mixed partial for a multi-index of total order <= 4."""
    idx = [i for i, a in enumerate(alpha) for _ in range(a)]
    if not idx:
        return H.value(z)
    i, rest = idx[0], list(alpha)
    rest[i] -= 1
    e = np.zeros_like(z)
    e[i] = h
    return (_fd_partial(H, z + e, rest, h) - _fd_partial(H, z - e, rest, h)) / (2 * h)


def test_free_particle_partials():
    H = models.flat(2)
    d = eval_ham(H, [0, 0, 1, 0], 2)
    assert d.value == 0.0
    assert d.partial((0, 0, 1, 0)) == 1.0
    assert d.partial((0, 0, 2, 0)) == 1.0
    assert all(d.partial(a) == 0.0 for a in [(1, 0, 0, 0), (0, 1, 0, 0), (2, 0, 0, 0), (1, 0, 1, 0)])


def test_analytic_identity_partials():
    H = HamiltonianModel("sin(q1)*p1", 2)
    d = eval_ham(H, [0, 0, 2, 0], 1)
    assert d.value == 0.0
    assert d.partial((1, 0, 0, 0)) == pytest.approx(2.0, abs=1e-15)
    assert d.partial((0, 0, 1, 0)) == 0.0


@pytest.mark.parametrize("H", CORPUS, ids=lambda H: H.name)
def test_derivatives_match_finite_differences(H, rng):
    n2 = 2 * H.n
    z = np.concatenate([rng.uniform(-0.5, 0.5, H.n), rng.uniform(0.4, 1.2, H.n)])
    d = eval_ham(H, z, 4)
    for order in range(1, 5):
        h = {1: 1e-5, 2: 1e-4, 3: 1e-3, 4: 4e-3}[order]
        for _ in range(4):
            alpha = np.bincount(rng.integers(0, n2, order), minlength=n2)
            exact = d.partial(alpha)
            fd = _fd_partial(H, z, alpha, h)
            assert abs(exact - fd) <= 1e-5 * max(1.0, abs(exact)), (order, alpha, exact, fd)


def test_vector_field_examples():
    qd, pd = ham_vector_field(models.flat(2), [0, 0, 1, 0])
    assert np.array_equal(qd, [1, 0]) and np.array_equal(pd, [0, 0])
    H = HamiltonianModel("sqrt(p1^2 + p2^2) - 1", 2)
    qd, pd = ham_vector_field(H, [0, 0, 0, 1])
    assert np.allclose(qd, [0, 1], atol=1e-15) and np.allclose(pd, 0)


@pytest.mark.parametrize("H", CORPUS, ids=lambda H: H.name)
def test_hamiltonian_identity(H, rng):
    Z = np.concatenate([rng.uniform(-1, 1, (1000, H.n)), rng.uniform(0.3, 1.5, (1000, H.n))], axis=1)
    dH = H.gradient(Z)
    X = H.vector_field(Z)
    assert np.max(np.abs(np.sum(dH * X, axis=1))) <= 1e-12


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2 * np.pi))
def test_conformal_factor_scales_field(q1, q2, phi):
    H = models.perturbed_metric(2)
    from conftest import level_point
    z = level_point(H, [q1, q2], [np.cos(phi), np.sin(phi)])
    g = 1 + 0.3 * np.sin(q1) + 0.2 * q2 ** 2
    gH = H.scaled("1 + 0.3*sin(q1) + 0.2*q2^2")
    assert np.allclose(gH.vector_field(z), g * H.vector_field(z), rtol=0, atol=1e-12)


def test_certify_projection_and_rejections():
    H = models.flat(2)
    lp = certify_level_point(H, [0, 0, 1.001, 0])
    assert lp.energy_residual <= 1e-10
    assert np.allclose(lp.p, [1, 0], atol=1e-9)
    with pytest.raises(OffLevelError):
        certify_level_point(H, [0, 0, 2.0, 0])
    with pytest.raises(VerticalTangencyError):
        certify_level_point(HamiltonianModel("q1 + 0*p1", 2), [0, 0, 0, 1])
