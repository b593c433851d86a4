import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import level_point
from podex import expr as ex
from podex import models
from podex.contact import _program_values
from podex.flow import integrate
from podex.perturb import (PlanError, build_displacement, bump_perturb, cutoff_expr, plan_resolution,
                           pullback_hamiltonian, resolve_intersection, sampled_distances)
from podex.perturb import _support_samples


def _chords(*x0s, window=(0, 2)):
    H = models.flat(len(x0s[0]) // 2)
    return H, [integrate(H, np.array(x, float), window) for x in x0s]


@pytest.fixture(scope="module")
def crossing():
    H, orbits = _chords([-1, 0, 0, 1, 0, 0], [0, -1, 0, 0, 1, 0], [-1, 0, 0.8, 1, 0, 0])
    return H, orbits, plan_resolution(orbits, np.zeros(3))


# ---------------------------------------------------------------- bumps

def test_zero_amplitude_bump_is_identity():
    H = models.flat(2)
    assert bump_perturb(H, amplitude=0) is H


def test_bump_is_seeded_and_compactly_supported():
    H = models.flat(2)
    a = bump_perturb(H, amplitude=0.05, radius=1.0, seed=3)
    b = bump_perturb(H, amplitude=0.05, radius=1.0, seed=3)
    c = bump_perturb(H, amplitude=0.05, radius=1.0, seed=4)
    Z = np.random.default_rng(0).normal(size=(200, 4))
    assert np.array_equal(a.value(Z), b.value(Z))
    assert not np.allclose(a.value(Z), c.value(Z))
    far = Z[np.linalg.norm(Z[:, :2], axis=1) >= 1.0]
    assert np.array_equal(a.value(far), H.value(far))


def test_bump_keeps_level_set_regular():
    H = bump_perturb(models.flat(2), amplitude=0.01, radius=2.0, seed=1)
    for th in np.linspace(0, 2 * np.pi, 24, endpoint=False):
        z = level_point(H, [0.3, -0.2], [np.cos(th), np.sin(th)])
        assert np.linalg.norm(H.gradient(z)[2:]) > 0.5


def test_bump_rejects_bad_radius():
    with pytest.raises(ValueError):
        bump_perturb(models.flat(2), amplitude=0.1, radius=0)


# ---------------------------------------------------------------- plans

def test_plan_rejects_planar_base():
    _, orbits = _chords([-1, 0, 1, 0], [0, -1, 0, 1])
    with pytest.raises(PlanError):
        plan_resolution(orbits, np.zeros(2))


def test_plan_geometry(crossing):
    _, _, plan = crossing
    assert np.allclose(plan.u, [1, 0, 0])
    assert abs(plan.nu @ plan.u) <= 1e-14 and np.linalg.norm(plan.nu) == pytest.approx(1)
    assert plan.radii == sorted(plan.radii, reverse=True)
    assert plan.isolation > 0 and plan.eps > 0 and plan.width > 0


def test_displacement_identity_at_zero_radius(crossing):
    _, _, plan = crossing
    phi = build_displacement(plan, 0.0)
    X = np.random.default_rng(1).normal(scale=0.3, size=(100, 3))
    assert np.array_equal(phi(X), X)


def test_displacement_rejects_oversized_radius(crossing):
    _, _, plan = crossing
    with pytest.raises(PlanError):
        build_displacement(plan, 2 * plan.radii[0])


@given(st.lists(st.floats(-1.2, 1.2), min_size=3, max_size=3), st.integers(0, 3))
def test_displacement_inverse(crossing, x, ri):
    plan = crossing[2]
    phi = build_displacement(plan, plan.radii[ri])
    x = np.array(x)
    assert np.allclose(phi.inverse(phi(x)), x, atol=1e-14)
    assert np.allclose(phi(phi.inverse(x)), x, atol=1e-14)


def test_displacement_support_is_exact(crossing):
    _, _, plan = crossing
    phi = build_displacement(plan, plan.radii[0])
    X = np.random.default_rng(2).uniform(-1.5, 1.5, size=(4000, 3))
    rel = X - plan.q_star
    s = rel @ plan.u
    w = rel - np.outer(s, plan.u) - np.outer(rel @ plan.nu, plan.nu)
    outside = (np.abs(s) >= plan.eps) | (np.linalg.norm(w, axis=1) >= plan.width)
    assert np.array_equal(phi(X[outside]), X[outside])
    assert not np.any(phi.support_contains(X[outside]))
    moved = np.linalg.norm(phi(X) - X, axis=1)
    assert np.max(moved) <= plan.radii[0] * (1 + 1e-12)


def test_displacement_symbolic_matches_numeric(crossing):
    _, _, plan = crossing
    phi = build_displacement(plan, plan.radii[1])
    X = np.random.default_rng(3).uniform(-0.6, 0.6, size=(50, 3))
    sym = _program_values(ex.Program([phi.beta], ["q1", "q2", "q3"]), X)[0]
    assert np.allclose(sym, phi._beta(X), atol=1e-14)


def test_pullback_outside_cutoff_is_unchanged(crossing):
    H, _, plan = crossing
    pert = pullback_hamiltonian(H, build_displacement(plan, plan.radii[0]))
    Z = np.random.default_rng(4).normal(size=(500, 6))
    Z[:, :3] += 3.0
    assert np.array_equal(pert.model.value(Z), H.value(Z))
    far_p = np.concatenate([np.zeros((50, 3)), -np.ones((50, 1)) * plan.p_star], axis=1)
    assert np.array_equal(pert.model.value(far_p), H.value(far_p))


def test_pullback_is_lift_invariant_on_plateau(crossing):
    H, _, plan = crossing
    r = plan.radii[0]
    phi = build_displacement(plan, r)
    Hr = pullback_hamiltonian(H, phi).model
    # points on the crossing orbit near q*, where the cutoff equals one
    rng = np.random.default_rng(5)
    for s in np.linspace(-0.4, 0.4, 9):
        q = plan.q_star + s * plan.u
        eta = plan.p_star + 0.05 * rng.normal(size=3)
        J = _jacobian(phi, q)
        y = phi(q)
        xi = np.linalg.solve(J.T, eta)
        # tolerance set by the finite-difference Jacobian
        assert Hr.value(np.concatenate([y, xi])) == pytest.approx(H.value(np.concatenate([q, eta])), abs=1e-8)


def _jacobian(phi, q, h=1e-7):
    cols = [(phi(q + h * e) - phi(q - h * e)) / (2 * h) for e in np.eye(q.size)]
    return np.stack(cols, axis=1)


def test_sampled_distances_shrink_with_radius(crossing):
    H, _, plan = crossing
    pts = _support_samples(plan, 3)
    chi = cutoff_expr(plan, 3)
    prev = None
    for r in plan.radii[:4]:
        d = sampled_distances(pullback_hamiltonian(H, build_displacement(plan, r), chi).model, H, pts)
        if prev is not None:
            assert d["c0_dist"] < prev["c0_dist"] and d["c1_dist"] < prev["c1_dist"]
        prev = d
    assert prev["c0_dist"] > 0


def test_already_disjoint_orbits_need_no_change():
    H, orbits = _chords([-1, 0, 0, 1, 0, 0], [0, -1, 0.5, 0, 1, 0])
    pert, report = resolve_intersection(H, orbits, np.zeros(3))
    assert pert.model is H and pert.r == 0.0
    assert report["sweep_stats"]["already_disjoint"]
    assert report["clearance"] == pytest.approx(0.5, abs=1e-3)


def test_first_radius_is_half_the_bystander_clearance(crossing):
    # the bystander chord runs parallel to the displaced one at distance 0.8
    _, _, plan = crossing
    assert plan.radii[0] == pytest.approx(0.4, abs=1e-3)


def test_first_radius_without_bystanders_is_the_width():
    _, orbits = _chords([-1, 0, 0, 1, 0, 0], [0, -1, 0, 0, 1, 0])
    plan = plan_resolution(orbits, np.zeros(3), angle_samples=8)
    assert plan.radii[0] == pytest.approx(plan.width)
