"""Phase space, expression Hamiltonians and the Hamiltonian vector field.

Points of T*R^n are stored as ``z = (q1..qn, p1..pn)``.  The symplectic
form is ``omega = sum dp_i ^ dq_i`` and ``X_H`` is defined by
``iota_{X_H} omega = -dH``, which in coordinates reads
``qdot = dH/dp`` and ``pdot = -dH/dq``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex
from .series import FloatBackend, MultiAlgebra, MultiBackend, TaylorBackend

LEVEL_TOL = 1e-10
SUBMERSION_TOL = 1e-8
CAPTURE_RADIUS = 1e-2
K_MAX = 8


class CertificationError(ValueError):
    """A point could not be certified as a regular, submersive level point."""


class OffLevelError(CertificationError):
    pass


class VerticalTangencyError(CertificationError):
    pass


@dataclass(frozen=True)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if q.shape != p.shape:
            raise ValueError("q and p must have the same length")
        if q.size < 2:
            raise ValueError("base dimension n must be at least 2")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("phase point has non-finite entries")
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_z(cls, z) -> "PhasePoint":
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return cls(z[:n], z[n:])


class HamiltonianModel:
    """An expression-defined Hamiltonian on T*R^n.

    Parameters
    ----------
    expression : str or Expr
        Infix expression over ``q1..qn, p1..pn``.
    n : int
        Base dimension.
    name : str
        Label used in reports.
    periods : sequence of float or None, optional
        Per-axis period of the base coordinates (``None`` for a line).
    """

    def __init__(self, expression, n: int, name: str = "H", periods: Sequence | None = None):
        if n < 2:
            raise ValueError("base dimension n must be at least 2")
        self.n = int(n)
        self.variables = ex.phase_variables(self.n)
        if isinstance(expression, str):
            expression = ex.parse(expression, self.variables)
        self.expr: ex.Expr = expression
        unknown = self.expr.variables() - set(self.variables)
        if unknown:
            raise ValueError(f"unknown variables {sorted(unknown)} for n={n}")
        self.name = name
        if periods is None:
            periods = [None] * self.n
        if len(periods) != self.n:
            raise ValueError("periods must have one entry per base axis")
        self.periods = tuple(None if p in (None, 0) else float(p) for p in periods)

    def __repr__(self):
        return f"HamiltonianModel({self.name!r}, n={self.n}, {ex.to_string(self.expr)!r})"

    def __str__(self):
        return ex.to_string(self.expr)

    @cached_property
    def gradient_exprs(self) -> list[ex.Expr]:
        return ex.gradient(self.expr, self.variables)

    @cached_property
    def field_exprs(self) -> list[ex.Expr]:
        g = self.gradient_exprs
        n = self.n
        return g[n:] + [ex.neg(d) for d in g[:n]]

    @cached_property
    def _value_grad_program(self) -> ex.Program:
        return ex.Program([self.expr] + self.gradient_exprs, self.variables)

    @cached_property
    def _hessian_program(self) -> ex.Program:
        g = self.gradient_exprs
        outs = [ex.diff(g[i], self.variables[j]) for i in range(2 * self.n) for j in range(2 * self.n)]
        return ex.Program(outs, self.variables)

    @cached_property
    def field_program(self) -> ex.Program:
        return ex.Program(self.field_exprs, self.variables)

    # ---------------------------------------------------------- batch eval
    def _run(self, program, z, strict):
        z = np.asarray(z, dtype=float)
        cols = [z[..., i] for i in range(2 * self.n)]
        with np.errstate(all="ignore") if not strict else _nullctx():
            return program.run(FloatBackend(strict), cols)

    def value_and_gradient(self, z, strict: bool = False):
        """``H(z)`` and ``grad H(z)`` for ``z`` of shape ``(..., 2n)``."""
        out = self._run(self._value_grad_program, z, strict)
        z = np.asarray(z)
        value = np.broadcast_to(out[0], z.shape[:-1]).astype(float)
        grad = np.stack([np.broadcast_to(g, z.shape[:-1]) for g in out[1:]], axis=-1).astype(float)
        return value, grad

    def value(self, z, strict: bool = False):
        return self.value_and_gradient(z, strict)[0]

    def gradient(self, z, strict: bool = False):
        return self.value_and_gradient(z, strict)[1]

    def hessian(self, z, strict: bool = False):
        z = np.asarray(z, dtype=float)
        out = self._run(self._hessian_program, z, strict)
        m = 2 * self.n
        flat = np.stack([np.broadcast_to(h, z.shape[:-1]) for h in out], axis=-1)
        return flat.reshape(z.shape[:-1] + (m, m))

    def vector_field(self, z, strict: bool = False):
        """``X_H(z)`` as an array of shape ``(..., 2n)``."""
        g = self.gradient(z, strict)
        return np.concatenate([g[..., self.n:], -g[..., : self.n]], axis=-1)

    def field_series(self, state: Sequence[np.ndarray], strict: bool = False) -> list[np.ndarray]:
        """``X_H`` evaluated on Taylor-series state ``[(L, *batch)] * 2n``."""
        with np.errstate(all="ignore") if not strict else _nullctx():
            out = self.field_program.run(TaylorBackend(strict), list(state))
        like = state[0]
        return [o if np.shape(o) == like.shape else np.broadcast_to(o, like.shape) for o in out]

    # --------------------------------------------------------- structure
    def scaled(self, factor, name: str | None = None) -> "HamiltonianModel":
        """The Hamiltonian ``factor * H`` (``factor`` an expression)."""
        f = ex.as_expr(factor)
        return HamiltonianModel(ex.mul(f, self.expr), self.n, name or f"({f})*{self.name}", self.periods)

    def wrap(self, z):
        """Reduce periodic base coordinates into their fundamental window."""
        z = np.array(z, dtype=float)
        for i, per in enumerate(self.periods):
            if per is not None:
                z[..., i] = np.mod(z[..., i], per)
        return z

    def base_difference(self, qa, qb):
        """``qa - qb`` with periodic axes reduced to the symmetric window."""
        d = np.asarray(qa, dtype=float) - np.asarray(qb, dtype=float)
        for i, per in enumerate(self.periods):
            if per is not None:
                d[..., i] = d[..., i] - per * np.round(d[..., i] / per)
        return d


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _as_z(x) -> np.ndarray:
    if isinstance(x, PhasePoint):
        return x.z
    if isinstance(x, LevelPoint):
        return x.point.z
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Derivatives:
    """All partial derivatives of a scalar field up to ``order`` at one point."""

    order: int
    nvars: int
    coeffs: np.ndarray = field(repr=False)
    algebra: MultiAlgebra = field(repr=False)

    @property
    def value(self) -> float:
        return float(self.coeffs[0])

    def partial(self, alpha: Sequence[int]) -> float:
        """Mixed partial ``d^alpha`` for a multi-index ``alpha``."""
        alpha = tuple(int(a) for a in alpha)
        if sum(alpha) > self.order:
            raise ValueError("requested derivative above computed order")
        i = self.algebra.index[alpha]
        return float(self.coeffs[i] * self.algebra.factorials[i])

    @property
    def gradient(self) -> np.ndarray:
        return self.tensor(1)

    @property
    def hessian(self) -> np.ndarray:
        return self.tensor(2)

    def tensor(self, r: int) -> np.ndarray:
        """Symmetric tensor of all order-``r`` partials, shape ``(m,)*r``."""
        m = self.nvars
        out = np.empty((m,) * r)
        for idx in np.ndindex(*out.shape):
            alpha = [0] * m
            for i in idx:
                alpha[i] += 1
            out[idx] = self.partial(alpha)
        return out


_ALGEBRAS: dict[tuple[int, int], MultiAlgebra] = {}


def _algebra(nvars: int, order: int) -> MultiAlgebra:
    key = (nvars, order)
    if key not in _ALGEBRAS:
        _ALGEBRAS[key] = MultiAlgebra(nvars, order)
    return _ALGEBRAS[key]


def eval_ham(H: HamiltonianModel, x, order: int, k_max: int = K_MAX) -> Derivatives:
    """Value and every mixed partial of ``H`` up to ``order`` at ``x``.

    Derivatives are exact (truncated multivariate series arithmetic).

    Raises
    ------
    DomainError
        If a log, sqrt or fractional power meets a nonpositive argument.
    """
    if not 0 <= order <= k_max:
        raise ValueError(f"order must be in [0, {k_max}]")
    z = _as_z(x)
    alg = _algebra(2 * H.n, order)
    vals = [alg.variable(i, z[i]) for i in range(2 * H.n)]
    prog = _series_program(H)
    coeffs = prog.run(MultiBackend(alg, strict=True), vals)[0]
    return Derivatives(order, 2 * H.n, np.asarray(coeffs, float), alg)


def _series_program(H: HamiltonianModel) -> ex.Program:
    prog = getattr(H, "_value_program", None)
    if prog is None:
        prog = ex.Program([H.expr], H.variables)
        H._value_program = prog
    return prog


def ham_vector_field(H: HamiltonianModel, x) -> tuple[np.ndarray, np.ndarray]:
    """``(qdot, pdot)`` with ``qdot = dH/dp`` and ``pdot = -dH/dq``."""
    xh = H.vector_field(_as_z(x), strict=True)
    return xh[: H.n].copy(), xh[H.n:].copy()


@dataclass(frozen=True)
class LevelPoint:
    """A phase point certified to lie on the regular level ``H = 0``."""

    point: PhasePoint
    energy_residual: float
    xh: np.ndarray
    base_velocity: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return self.point.z

    @property
    def q(self) -> np.ndarray:
        return self.point.q

    @property
    def p(self) -> np.ndarray:
        return self.point.p


def project_to_level(H: HamiltonianModel, z, direction=None, iters: int = 8, tol: float = 1e-14):
    """Newton projection of a batch ``(..., 2n)`` onto ``H = 0``.

    With ``direction=None`` each step moves along the current gradient;
    otherwise along the fixed ``direction`` (same shape as ``z``), which
    gives a smooth chart of the level near a base point.
    """
    z = np.array(z, dtype=float)
    for _ in range(iters):
        h, g = H.value_and_gradient(z)
        d = g if direction is None else direction
        slope = np.einsum("...i,...i->...", g, d)
        with np.errstate(all="ignore"):
            step = np.where(slope != 0, h / slope, np.nan)
        z = z - step[..., None] * d
        if np.all(np.abs(h) <= tol):
            break
    return z


def certify_level_point(H: HamiltonianModel, x, level_tol: float = LEVEL_TOL,
                        submersion_tol: float = SUBMERSION_TOL,
                        capture_radius: float = CAPTURE_RADIUS) -> LevelPoint:
    """Project ``x`` onto ``H = 0`` and certify that ``d pi_Q X_H != 0`` there.

    Raises
    ------
    OffLevelError
        ``|H(x)| > capture_radius`` or Newton failed to reach ``level_tol``.
    VerticalTangencyError
        ``|d pi_Q X_H| <= submersion_tol`` at the projected point.
    """
    z = _as_z(x).astype(float)
    h0 = float(H.value(z, strict=True))
    if not abs(h0) <= capture_radius:
        raise OffLevelError(f"|H(x)| = {abs(h0):.3e} exceeds capture radius {capture_radius:.1e}")
    g0 = H.gradient(z, strict=True)
    if np.linalg.norm(g0) <= submersion_tol:
        raise VerticalTangencyError("grad H vanishes: level is not regular here")
    for _ in range(20):
        h, g = H.value_and_gradient(z, strict=True)
        if abs(h) <= 0.1 * level_tol:
            break
        z = z - (h / (g @ g)) * g
    h = float(H.value(z, strict=True))
    if not abs(h) <= level_tol:
        raise OffLevelError(f"projection stalled at |H| = {abs(h):.3e}")
    xh = H.vector_field(z, strict=True)
    base_velocity = xh[: H.n].copy()
    if np.linalg.norm(base_velocity) <= submersion_tol:
        raise VerticalTangencyError(
            f"|d pi_Q X_H| = {np.linalg.norm(base_velocity):.3e} <= {submersion_tol:.1e}")
    return LevelPoint(PhasePoint.from_z(z), abs(h), xh, base_velocity)


def level_basis(grad: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``ker dH`` for a batch of gradients ``(..., m)``.

    Returns shape ``(..., m, m-1)`` (columns span the tangent space of the level).
    """
    g = np.asarray(grad, dtype=float)
    m = g.shape[-1]
    u = g / np.linalg.norm(g, axis=-1, keepdims=True)
    # Householder reflection mapping e_k to u, k the largest |u| component
    k = np.argmax(np.abs(u), axis=-1)
    e = np.zeros_like(u)
    np.put_along_axis(e, k[..., None], 1.0, axis=-1)
    s = np.take_along_axis(u, k[..., None], axis=-1)
    v = u - np.sign(np.where(s == 0, 1.0, s)) * e
    vv = np.einsum("...i,...i->...", v, v)[..., None, None]
    Q = np.eye(m) - 2.0 * v[..., :, None] * v[..., None, :] / np.where(vv == 0, 1.0, vv)
    # columns of Q other than column k are orthonormal and orthogonal to u
    keep = np.ones(g.shape[:-1] + (m,), bool)
    np.put_along_axis(keep, k[..., None], False, axis=-1)
    cols = np.moveaxis(Q, -1, -2)[keep].reshape(g.shape[:-1] + (m - 1, m))
    return np.moveaxis(cols, -1, -2)
