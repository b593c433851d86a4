import math

import numpy as np
import pytest

from podex import models
from podex.heart import fiber_curve, heart_fiber_scan, inflection_angles, parallel_angles


@pytest.fixture(scope="module")
def scan():
    return heart_fiber_scan(models.heart(0.7), grid=128)


def test_heart_has_anti_winding_and_iso_contractible_components(scan):
    assert scan.component_count == 2
    by_flavor = {c["flavor"]: c for c in scan.components}
    assert set(by_flavor) == {"anti", "iso"}
    assert by_flavor["anti"]["winding"] == [1, 1] and not by_flavor["anti"]["contractible"]
    assert by_flavor["iso"]["contractible"]
    assert scan.checks["rejected_roots"] == 0
    assert scan.checks["max_residual"] <= 1e-8


def test_heart_inflections_match_limacon_curvature(scan):
    # the fiber is the polar curve rho = 1 - b sin(phi); its curvature
    # vanishes where sin(phi) = (1 + 2 b^2) / (3 b)
    b = 0.7
    s = (1 + 2 * b * b) / (3 * b)
    expect = sorted([math.asin(s), math.pi - math.asin(s)])
    got = [d["phi"] for d in scan.inflections]
    assert np.allclose(got, expect, atol=1e-9)
    assert [d["order"] for d in scan.inflections] == [1, 1]


def test_iso_component_closes_at_inflections(scan):
    iso = next(c["id"] for c in scan.components if c["flavor"] == "iso")
    closure_ids = set(scan.component[scan.closure].tolist())
    assert closure_ids == {iso}


def test_parallels_pair_each_inflection_with_both_flavors(scan):
    for j in range(2):
        flv = sorted(p["flavor"] for p in scan.parallels if p["inflection"] == j)
        assert flv == ["anti", "iso"]


def test_round_fiber_is_antipodal_only():
    s = heart_fiber_scan(models.heart(0.0), grid=64)
    assert s.component_count == 1
    assert s.components[0]["flavor"] == "anti"
    assert s.inflections == []
    assert np.max(np.abs(np.mod(s.phi2 - s.phi1, 2 * np.pi) - np.pi)) <= 1e-12


def test_round_fiber_parallels():
    out = parallel_angles(models.heart(0.0), (0, 0), 0.3)
    assert len(out) == 1
    assert out[0][1] == "anti" and out[0][0] == pytest.approx(0.3 + np.pi, abs=1e-10)


def test_convex_fiber_has_no_inflections():
    assert inflection_angles(models.heart(0.4), (0, 0)).size == 0


@pytest.mark.parametrize("b", [-0.1, 1.0, 1.5])
def test_heart_parameter_range(b):
    with pytest.raises(ValueError):
        models.heart(b)


def test_fiber_is_regular_and_on_level():
    H = models.heart(0.7)
    phi = np.linspace(0, 2 * np.pi, 400, endpoint=False)
    Z = fiber_curve(H, (0.2, -0.1), phi)
    assert np.max(np.abs(H.value(Z))) <= 1e-12
    assert np.min(np.linalg.norm(H.vector_field(Z)[:, :2], axis=1)) > 1e-2


def test_scan_rejects_other_orders():
    with pytest.raises(ValueError):
        heart_fiber_scan(models.heart(0.7), k=2)
    with pytest.raises(ValueError):
        heart_fiber_scan(models.flat(3))
