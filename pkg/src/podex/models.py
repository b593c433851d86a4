"""Canonical Hamiltonians used by tests, scenarios and examples."""
from __future__ import annotations

from typing import Callable

from . import expr as ex
from .hamsys import HamiltonianModel


def _vars(n):
    q = [ex.var(f"q{i + 1}") for i in range(n)]
    p = [ex.var(f"p{i + 1}") for i in range(n)]
    return q, p


def _norm2(v):
    out = ex.ZERO
    for a in v:
        out = out + a * a
    return out


def flat(n: int = 2) -> HamiltonianModel:
    """Unit cosphere bundle of the Euclidean metric: ``|p|^2/2 - 1/2``."""
    _, p = _vars(n)
    return HamiltonianModel(_norm2(p) / 2 - 0.5, n, f"flat{n}")


def perturbed_metric(n: int = 2, eps: float = 0.1) -> HamiltonianModel:
    """Conformally perturbed metric ``|p|^2 (1 + eps sin q1)/2 - 1/2``."""
    q, p = _vars(n)
    return HamiltonianModel(_norm2(p) * (1 + eps * ex.sin(q[0])) / 2 - 0.5, n, "perturbed_metric")


def pendulum(n: int = 2, energy: float = 1.2) -> HamiltonianModel:
    """``|p|^2/2 + cos q1 - energy`` (regular, submersive for energy > 1)."""
    q, p = _vars(n)
    return HamiltonianModel(_norm2(p) / 2 + ex.cos(q[0]) - energy, n, "pendulum")


def magnetic(n: int = 2, field: float = 0.3) -> HamiltonianModel:
    """Charge in a constant magnetic field in the (q1, q2) plane."""
    q, p = _vars(n)
    a = [ex.ZERO] * n
    a[0] = -0.5 * field * q[1]
    a[1] = 0.5 * field * q[0]
    return HamiltonianModel(_norm2([pi - ai for pi, ai in zip(p, a)]) / 2 - 0.5, n, "magnetic")


def randers(n: int = 2, wind: float = 0.3) -> HamiltonianModel:
    """Non-reversible Finsler fiber ``|p| + wind * p1 - 1`` (shifted round sphere)."""
    _, p = _vars(n)
    return HamiltonianModel(ex.sqrt(_norm2(p)) + wind * p[0] - 1, n, "randers")


def heart(b: float = 0.7) -> HamiltonianModel:
    """Fiberwise Hamiltonian on T*R^2 with a dimpled, heart-like fiber.

    ``H = |p| + b p2/|p| - 1``; in polar covector coordinates the fiber is
    the limacon ``rho = 1 - b sin(phi)``, star-shaped about ``p = 0``.  For
    ``1/2 < b < 1`` it is regular with exactly two inflection points.
    """
    if not 0.0 <= b < 1.0:
        raise ValueError("heart parameter b must lie in [0, 1)")
    _, p = _vars(2)
    r = ex.sqrt(_norm2(p))
    return HamiltonianModel(r + b * p[1] / r - 1, 2, f"heart(b={b})")


MODELS: dict[str, Callable[..., HamiltonianModel]] = {
    "flat": flat,
    "perturbed_metric": perturbed_metric,
    "pendulum": pendulum,
    "magnetic": magnetic,
    "randers": randers,
    "heart": heart,
}
