import math

import numpy as np
from hypothesis import given, strategies as st

from podex.series import compose, revert, sdiv, sexp, smul, ssincos, taylor_of_function


def test_exp_and_sin_coefficients():
    c = taylor_of_function("exp", np.array(0.0), 8)
    assert np.allclose(c, [1 / math.factorial(j) for j in range(8)], atol=1e-15)
    s = taylor_of_function("sin", np.array(0.0), 6)
    assert np.allclose(s, [0, 1, 0, -1 / 6, 0, 1 / 120], atol=1e-15)


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_division_inverts_product(u, v):
    u, v = np.array(u), np.array(v)
    v[0] = 1.0 + abs(v[0])
    assert np.allclose(sdiv(smul(u, v), v), u, atol=1e-9)


def test_batched_paths_agree_with_scalar():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    v[0] += 3
    for j in range(3):
        assert np.allclose(smul(u, v)[:, j], smul(u[:, j], v[:, j]), atol=1e-14)
        assert np.allclose(sdiv(u, v)[:, j], sdiv(u[:, j], v[:, j]), atol=1e-14)


def test_revert_composes_to_identity():
    f = np.array([0.0, 2.0, 0.3, -0.1, 0.05, 0.0, 0.01])
    g = revert(f)
    ident = np.zeros(7)
    ident[1] = 1
    assert np.allclose(compose(f, g), ident, atol=1e-12)
    assert np.allclose(compose(g, f), ident, atol=1e-12)


def test_sincos_pythagoras():
    u = np.array([0.3, 1.0, -0.5, 0.2, 0.0, 0.1])
    s, c = ssincos(u)
    one = smul(s, s) + smul(c, c)
    assert np.allclose(one, [1, 0, 0, 0, 0, 0], atol=1e-14)
    assert np.allclose(sexp(np.zeros(4)), [1, 0, 0, 0])
