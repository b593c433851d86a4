"""Radial charts, Reeb fields and contact Hamiltonian fields on a level set.

A radial chart fixes a covector ``P`` and describes the level set by rays
``p = P + r d(u)`` with direction ``d(u) = d0 + E u`` (``E`` spans the
complement of ``d0``).  Chart coordinates are ``w = (q1..qn, u1..u_{n-1})``.
In them the Liouville form ``lambda_P = (p - P) dq`` restricts to
``alpha = r(w) d(u) . dq``, so its ``u`` components vanish.

Matrices of 2-forms use ``M_ab = d_a alpha_b - d_b alpha_a`` so that
``d alpha(X, Y) = X^T M Y``.  The Reeb field solves
``[[M, a], [a^T, 0]] [R; mu] = [0; 1]`` and the contact Hamiltonian field
of ``h`` solves the same system with right-hand side ``[grad h; h]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import expr as ex
from .hamsys import HamiltonianModel, _as_z
from .series import FloatBackend, TaylorBackend, series_solve
from .subjets import CurveJet, graph_derivatives, taylor_coefficients

RAY_TOL = 1e-6
H_MIN = 0.1
QUADRATIC_TOL = 1e-9


class ChartError(ValueError):
    """The requested radial chart is invalid (ray tangency, unsupported H)."""


class SingularSystemError(ArithmeticError):
    """The Reeb system is singular; the chart invariant is violated."""


class TransversalityError(ValueError):
    """The target curve is tangent to the contact hyperplane."""


class NegativeHamiltonianError(ValueError):
    """The constructed contact Hamiltonian is not positive on the box."""


def chart_variables(n: int) -> list[str]:
    return [f"q{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(n - 1)]


def _program_values(prog: ex.Program, W: np.ndarray) -> list[np.ndarray]:
    cols = [W[..., i] for i in range(W.shape[-1])]
    with np.errstate(all="ignore"):
        out = prog.run(FloatBackend(False), cols)
    return [np.broadcast_to(np.asarray(o, float), W.shape[:-1]) for o in out]


@dataclass(eq=False)
class RadialChart:
    """Radial chart of ``Sigma = H^-1(0)`` about the covector section ``P``.

    Attributes
    ----------
    H : HamiltonianModel
    P : array (n,)
    d0 : array (n,)
        Direction of the central ray, ``p0 - P``.
    E : array (n, n-1)
        Orthonormal complement of ``d0``.
    box : list of (lo, hi)
        Bounds of the chart coordinates ``w``.
    r : Expr
        Radial coordinate as an expression in ``w``.
    """

    H: HamiltonianModel
    P: np.ndarray
    d0: np.ndarray
    E: np.ndarray
    box: list
    r: ex.Expr = field(repr=False)
    center: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.H.n

    @property
    def dim(self) -> int:
        return 2 * self.n - 1

    @cached_property
    def variables(self) -> list[str]:
        return chart_variables(self.n)

    @cached_property
    def direction_exprs(self) -> list[ex.Expr]:
        u = [ex.var(f"u{j + 1}") for j in range(self.n - 1)]
        out = []
        for i in range(self.n):
            e = ex.const(float(self.d0[i]))
            for j in range(self.n - 1):
                if self.E[i, j] != 0:
                    e = e + float(self.E[i, j]) * u[j]
            out.append(e)
        return out

    @cached_property
    def alpha_exprs(self) -> list[ex.Expr]:
        """Components of ``alpha`` on ``dw``."""
        return [self.r * d for d in self.direction_exprs] + [ex.ZERO] * (self.n - 1)

    @cached_property
    def dalpha_exprs(self) -> list[list[ex.Expr]]:
        a = self.alpha_exprs
        v = self.variables
        m = self.dim
        M = [[ex.ZERO] * m for _ in range(m)]
        for i in range(m):
            for j in range(i + 1, m):
                e = ex.diff(a[j], v[i]) - ex.diff(a[i], v[j])
                M[i][j] = e
                M[j][i] = ex.neg(e)
        return M

    @cached_property
    def embedding_exprs(self) -> list[ex.Expr]:
        """Phase coordinates ``z(w)``."""
        q = [ex.var(f"q{i + 1}") for i in range(self.n)]
        p = [float(self.P[i]) + self.r * d for i, d in enumerate(self.direction_exprs)]
        return q + p

    @cached_property
    def _frame_program(self) -> ex.Program:
        m = self.dim
        outs = [self.r] + self.alpha_exprs + [self.dalpha_exprs[i][j] for i in range(m) for j in range(m)]
        return ex.Program(outs, self.variables)

    @cached_property
    def _embedding_program(self) -> ex.Program:
        z = self.embedding_exprs
        outs = z + [ex.diff(zi, v) for zi in z for v in self.variables]
        return ex.Program(outs, self.variables)

    # ------------------------------------------------------------ evaluation
    def structure(self, W):
        """``(r, a, M)`` at chart points ``W (..., 2n-1)``."""
        W = np.asarray(W, float)
        m = self.dim
        vals = _program_values(self._frame_program, W)
        r = vals[0]
        a = np.stack(vals[1:1 + m], axis=-1)
        M = np.stack(vals[1 + m:], axis=-1).reshape(W.shape[:-1] + (m, m))
        return r, a, M

    def structure_series(self, state: Sequence[np.ndarray]):
        """``(a, M)`` on Taylor-series chart coordinates ``[(L, *batch)] * (2n-1)``."""
        m = self.dim
        with np.errstate(all="ignore"):
            vals = self._frame_program.run(TaylorBackend(False), list(state))
        like = state[0]
        vals = [np.broadcast_to(v, like.shape) for v in vals]
        a = np.stack(vals[1:1 + m])
        M = np.stack(vals[1 + m:]).reshape((m, m) + like.shape)
        return a, M

    def to_phase(self, W) -> np.ndarray:
        W = np.asarray(W, float)
        vals = _program_values(self._embedding_program, W)
        return np.stack(vals[: 2 * self.n], axis=-1)

    def embedding_jacobian(self, W) -> np.ndarray:
        """``dz/dw`` at chart points, shape ``(..., 2n, 2n-1)``."""
        W = np.asarray(W, float)
        vals = _program_values(self._embedding_program, W)
        J = np.stack(vals[2 * self.n:], axis=-1)
        return J.reshape(W.shape[:-1] + (2 * self.n, self.dim))

    def to_chart(self, z) -> np.ndarray:
        """Chart coordinates of phase points ``z (..., 2n)`` (no level check)."""
        z = np.asarray(z, float)
        n = self.n
        v = z[..., n:] - self.P
        s = (v @ self.d0) / (self.d0 @ self.d0)
        d = v / s[..., None]
        return np.concatenate([z[..., :n], d @ self.E], axis=-1)

    def contains(self, W) -> np.ndarray:
        W = np.asarray(W, float)
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        return np.all((W >= lo) & (W <= hi), axis=-1)

    def sample(self, count: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        lo = np.array([b[0] for b in self.box])
        hi = np.array([b[1] for b in self.box])
        return lo + (hi - lo) * rng.uniform(size=(count, self.dim))

    def describe(self) -> dict:
        """Chart descriptor with expressions in the config syntax."""
        return {
            "P": self.P.tolist(), "d0": self.d0.tolist(), "E": self.E.tolist(),
            "box": [list(map(float, b)) for b in self.box], "variables": self.variables,
            "r": ex.to_string(self.r), "hamiltonian": str(self.H),
        }


def _ray_coefficients(H: HamiltonianModel, d_exprs, P):
    """``A, B, C``: Taylor coefficients of ``rho -> H(q, P + rho d)`` at ``rho = 1``."""
    n = H.n
    names = H.variables
    at = {names[i]: ex.var(names[i]) for i in range(n)}
    for i in range(n):
        at[names[n + i]] = float(P[i]) + d_exprs[i]
    g = H.gradient_exprs
    A = ex.substitute(H.expr, at)
    B = ex.ZERO
    C = ex.ZERO
    for i in range(n):
        B = B + d_exprs[i] * ex.substitute(g[n + i], at)
        for j in range(n):
            hij = ex.diff(g[n + i], names[n + j])
            C = C + d_exprs[i] * d_exprs[j] * ex.substitute(hij, at)
    return A, B, C * 0.5


def build_radial_chart(H: HamiltonianModel, center, P=None, box=None, half_widths=None,
                       ray_tol: float = RAY_TOL, samples: int = 256, seed: int = 0) -> RadialChart:
    """Validated radial chart through the level point ``center``.

    ``box`` bounds the chart coordinates; by default it is the cube of
    half width ``half_widths`` (0.5 in ``q`` and 0.3 in ``u``) about the
    center.  The radial coordinate is explicit when ``H`` is at most
    quadratic along every ray from ``P``.

    Raises
    ------
    ChartError
        Ray tangent to the fiber at the center, ``H`` not quadratic along
        rays, or a failed transversality or single-crossing check.
    """
    z0 = _as_z(center)
    n = H.n
    P = np.zeros(n) if P is None else np.asarray(P, float)
    q0, p0 = z0[:n], z0[n:]
    d0 = p0 - P
    if np.linalg.norm(d0) == 0:
        raise ChartError("P coincides with the center covector")
    gp = H.gradient(z0)[n:]
    if abs(d0 @ gp) <= ray_tol * np.linalg.norm(d0) * np.linalg.norm(gp):
        raise ChartError("P lies on the fiber's tangent hyperplane at the center (ray tangency)")
    _, _, vt = np.linalg.svd(d0[None, :])
    E = vt[1:].T
    u = [ex.var(f"u{j + 1}") for j in range(n - 1)]
    d_exprs = []
    for i in range(n):
        e = ex.const(float(d0[i]))
        for j in range(n - 1):
            if E[i, j] != 0:
                e = e + float(E[i, j]) * u[j]
        d_exprs.append(e)
    A, B, C = _ray_coefficients(H, d_exprs, P)
    sign = 1.0 if d0 @ gp > 0 else -1.0
    # root of A + B t + C t^2 nearest t = 0, in the cancellation-free form
    delta = -2.0 * A / (B + sign * ex.sqrt(B * B - 4.0 * A * C))
    r = 1.0 + delta
    if box is None:
        hw = half_widths if half_widths is not None else [0.5] * n + [0.3] * (n - 1)
        w0 = np.concatenate([q0, np.zeros(n - 1)])
        box = [(float(w0[i] - hw[i]), float(w0[i] + hw[i])) for i in range(2 * n - 1)]
    chart = RadialChart(H, P, d0, E, [tuple(map(float, b)) for b in box], r,
                        np.concatenate([q0, np.zeros(n - 1)]))
    _validate_chart(chart, ray_tol, samples, seed)
    return chart


def _validate_chart(chart: RadialChart, ray_tol: float, samples: int, seed: int) -> None:
    H = chart.H
    n = chart.n
    W = np.vstack([chart.center[None, :], chart.sample(samples, seed)])
    r, a, _ = chart.structure(W)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise ChartError("radial coordinate undefined or nonpositive on the box")
    Z = chart.to_phase(W)
    res = np.abs(H.value(Z))
    if np.max(res) > QUADRATIC_TOL * max(1.0, float(np.max(np.abs(Z)))):
        raise ChartError(f"H is not at most quadratic along rays (level residual {np.max(res):.2e}); "
                         "radial charts need an explicit radial coordinate")
    xh = H.vector_field(Z)
    lam = np.sum((Z[:, n:] - chart.P) * xh[:, :n], axis=1)
    if np.min(np.abs(lam)) < ray_tol:
        raise ChartError(f"rays nearly tangent to Sigma: min |alpha(X_H)| = {np.min(np.abs(lam)):.2e}")
    # single crossing along sampled rays
    rho = np.linspace(0.05, 3.0, 120)[None, :, None]
    d = (Z[:, n:] - chart.P) / r[:, None]
    ray = np.concatenate([np.broadcast_to(Z[:, None, :n], (Z.shape[0], rho.shape[1], n)),
                          chart.P + rho * d[:, None, :]], axis=2)
    vals = H.value(ray)
    for row in vals:
        fin = row[np.isfinite(row)]
        if np.sum(np.diff(np.sign(fin)) != 0) > 1:
            raise ChartError("a sampled ray meets Sigma more than once")


# ------------------------------------------------------------------ frames

@dataclass(frozen=True)
class ContactFrame:
    """Reeb vector, contact hyperplane basis and ``d alpha`` on that basis."""

    point: np.ndarray
    reeb: np.ndarray
    xi: np.ndarray          # (2n-2, 2n-1) rows annihilated by alpha
    dalpha: np.ndarray      # (2n-2, 2n-2) matrix of d alpha on the xi basis
    alpha: np.ndarray
    M: np.ndarray

    @property
    def reeb_residuals(self) -> tuple[float, float]:
        """``|alpha(R) - 1|`` and ``max |d alpha(R, e_j)|`` over the xi basis."""
        return (abs(float(self.alpha @ self.reeb) - 1.0),
                float(np.max(np.abs(self.reeb @ self.M @ self.xi.T))))


def _bordered(a, M):
    m = a.shape[-1]
    K = np.zeros(a.shape[:-1] + (m + 1, m + 1))
    K[..., :m, :m] = M
    K[..., :m, m] = a
    K[..., m, :m] = a
    return K


def _solve_bordered(a, M, rhs_vec, rhs_last, cond_max=1e12):
    K = _bordered(a, M)
    rhs = np.concatenate([rhs_vec, np.asarray(rhs_last, float)[..., None]], axis=-1)
    c = np.linalg.cond(K)
    if np.any(~np.isfinite(c)) or np.any(c > cond_max):
        raise SingularSystemError(f"Reeb system singular (condition {np.max(c):.2e})")
    sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    return sol[..., :-1], sol[..., -1]


def reeb_vectors(chart: RadialChart, W) -> np.ndarray:
    """Reeb field at chart points ``W (..., 2n-1)`` (batched)."""
    _, a, M = chart.structure(W)
    R, _ = _solve_bordered(a, M, np.zeros_like(a), np.ones(a.shape[:-1]))
    return R


def reeb_field(chart: RadialChart, point) -> ContactFrame:
    """Contact frame at a chart point (or phase point on ``Sigma``).

    Raises
    ------
    SingularSystemError
        If ``d alpha`` is degenerate on ``ker alpha``.
    """
    w = _chart_point(chart, point)
    _, a, M = chart.structure(w)
    R, _ = _solve_bordered(a, M, np.zeros_like(a), 1.0)
    _, _, vt = np.linalg.svd(a[None, :])
    xi = vt[1:]
    return ContactFrame(w, R, xi, xi @ M @ xi.T, a, M)


def _chart_point(chart: RadialChart, point) -> np.ndarray:
    x = np.asarray(point.z if hasattr(point, "z") else point, float)
    if x.shape[-1] == 2 * chart.n:
        return chart.to_chart(x)
    return x


def ambient_reeb(chart: RadialChart, W) -> np.ndarray:
    """Reeb vectors pushed to phase space, ``(..., 2n)``."""
    R = reeb_vectors(chart, W)
    return np.einsum("...ij,...j->...i", chart.embedding_jacobian(W), R)


def reeb_parallelism(chart: RadialChart, W) -> np.ndarray:
    """Sine of the angle between the ambient Reeb vector and ``X_H``."""
    Ra = ambient_reeb(chart, W)
    X = chart.H.vector_field(chart.to_phase(W))
    a = Ra / np.linalg.norm(Ra, axis=-1, keepdims=True)
    b = X / np.linalg.norm(X, axis=-1, keepdims=True)
    # rejection of a from b; avoids the cancellation in sqrt(1 - cos^2)
    return np.linalg.norm(a - np.sum(a * b, axis=-1, keepdims=True) * b, axis=-1)


# -------------------------------------------------------- contact fields

def _h_expr(h, chart: RadialChart) -> ex.Expr:
    if isinstance(h, ex.Expr):
        e = h
    elif isinstance(h, str):
        e = ex.parse(h, chart.variables)
    else:
        e = ex.const(float(h))
    unknown = e.variables() - set(chart.variables)
    if unknown:
        raise ValueError(f"h uses unknown variables {sorted(unknown)}")
    return e


class ContactHamiltonian:
    """A contact Hamiltonian ``h`` on a radial chart with its field ``R_h``."""

    def __init__(self, chart: RadialChart, h):
        self.chart = chart
        self.expr = _h_expr(h, chart)
        self.program = ex.Program([self.expr] + ex.gradient(self.expr, chart.variables), chart.variables)

    def __str__(self):
        return ex.to_string(self.expr)

    def value_and_gradient(self, W):
        vals = _program_values(self.program, np.asarray(W, float))
        return vals[0], np.stack(vals[1:], axis=-1)

    def value(self, W) -> np.ndarray:
        return self.value_and_gradient(W)[0]

    def field(self, W) -> np.ndarray:
        """``R_h`` at chart points (batched)."""
        _, a, M = self.chart.structure(W)
        h, g = self.value_and_gradient(W)
        X, _ = _solve_bordered(a, M, g, h)
        return X

    def field_series(self, state):
        a, M = self.chart.structure_series(state)
        with np.errstate(all="ignore"):
            vals = self.program.run(TaylorBackend(False), list(state))
        like = state[0]
        vals = [np.broadcast_to(v, like.shape) for v in vals]
        m = self.chart.dim
        K = np.zeros((m + 1, m + 1) + like.shape)
        K[:m, :m] = M
        K[:m, m] = a
        K[m, :m] = a
        b = np.stack(vals[1:] + vals[:1])
        x = series_solve(K, b)
        return [x[i] for i in range(m)]

    def orbit_series(self, w0, order: int) -> np.ndarray:
        """Taylor coefficients of the ``R_h`` orbit through ``w0``, ``(order+1, ..., 2n-1)``."""
        return taylor_coefficients(self.field_series, np.asarray(w0, float), order)

    def orbit_jet(self, w0, k: int, axis: int = 0) -> CurveJet:
        s = self.orbit_series(w0, max(k, 1))
        base, y, speed = graph_derivatives(s, axis, k)
        return CurveJet(axis, float(base), y[0].copy(), y[1:].copy(), k, int(np.sign(speed)))


@dataclass(frozen=True)
class ContactVector:
    vector: np.ndarray
    dh_reeb: float
    cross_check: float


def contact_ham_field(chart: RadialChart, h, point, check: bool = True) -> ContactVector:
    """``R_h`` with ``alpha(R_h) = h`` and ``iota_{R_h} d alpha = dh(R) alpha - dh``.

    With ``check`` the result is compared with the Reeb field of
    ``alpha / h``, computed from ``d(f alpha) = f d alpha + df ^ alpha``.

    Raises
    ------
    ValueError
        If ``h <= 0`` at the point.
    SingularSystemError
        If the linear system is singular.
    """
    w = _chart_point(chart, point)
    ch = h if isinstance(h, ContactHamiltonian) else ContactHamiltonian(chart, h)
    hv, g = ch.value_and_gradient(w)
    hv = float(hv)
    if not hv > 0:
        raise ValueError(f"contact Hamiltonian must be positive, got h = {hv}")
    _, a, M = chart.structure(w)
    X, mu = _solve_bordered(a, M, g, hv)
    cross = math.nan
    if check:
        f = 1.0 / hv
        df = -g / hv ** 2
        Mf = f * M + np.outer(df, a) - np.outer(a, df)
        Rf, _ = _solve_bordered(f * a, Mf, np.zeros_like(a), 1.0)
        cross = float(np.max(np.abs(Rf - X)) / max(1.0, float(np.max(np.abs(X)))))
    return ContactVector(X, float(mu), cross)


# ---------------------------------------------------- Liouville identities

def liouville_residuals(H: HamiltonianModel, P, Z) -> tuple[float, float]:
    """Residuals of ``d lambda_P = omega`` and ``iota_{Y_P} omega = lambda_P``.

    ``lambda_P`` has coefficient vector ``l(z) = (p - P, 0)`` on ``dz`` and
    ``Y_P = (0, p - P)``.  The exterior derivative is assembled from exact
    partial derivatives of the coefficient expressions.
    """
    n = H.n
    P = np.asarray(P, float)
    names = ex.phase_variables(n)
    comps = [ex.var(names[n + i]) - float(P[i]) for i in range(n)] + [ex.ZERO] * n
    D = [[ex.diff(comps[j], names[i]) - ex.diff(comps[i], names[j]) for j in range(2 * n)]
         for i in range(2 * n)]
    prog = ex.Program([D[i][j] for i in range(2 * n) for j in range(2 * n)] + comps, names)
    Z = np.atleast_2d(np.asarray(Z, float))
    vals = _program_values(prog, Z)
    Dm = np.stack(vals[: 4 * n * n], axis=-1).reshape(Z.shape[0], 2 * n, 2 * n)
    lam = np.stack(vals[4 * n * n:], axis=-1)
    Om = np.block([[np.zeros((n, n)), -np.eye(n)], [np.eye(n), np.zeros((n, n))]])
    d_err = float(np.max(np.abs(Dm - Om)))
    Y = np.concatenate([np.zeros((Z.shape[0], n)), Z[:, n:] - P], axis=1)
    iota = Y @ Om
    return d_err, float(np.max(np.abs(iota - lam)))


# ------------------------------------------------------- jet realization

@dataclass
class Realization:
    """Contact Hamiltonian realizing a curve jet, with diagnostics."""

    hamiltonian: ContactHamiltonian
    target: CurveJet
    base_point: np.ndarray
    box: list
    orientation: int
    shrunk: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def expr(self) -> ex.Expr:
        return self.hamiltonian.expr

    def roundtrip(self, k: int | None = None) -> CurveJet:
        k = self.target.k if k is None else k
        return self.hamiltonian.orbit_jet(self.base_point, k, self.target.axis)

    def roundtrip_error(self) -> np.ndarray:
        """Per-order max deviation ``|y^(j) - target^(j)|``, ``j = 0..k``."""
        got = self.roundtrip()
        return np.max(np.abs(got.all_coeffs - self.target.all_coeffs), axis=1)


def representative(target: CurveJet, variables: Sequence[str]) -> list[ex.Expr]:
    """Polynomial representative ``x -> (x, y(x))`` of a jet, as expressions in ``variables[axis]``."""
    x = ex.var(variables[target.axis])
    tau = x - target.base
    allc = target.all_coeffs
    comps = []
    for c in range(allc.shape[1]):
        e = ex.ZERO
        for j in range(target.k, -1, -1):
            e = e * tau + float(allc[j, c]) / math.factorial(j)
        comps.append(e)
    out = list(comps)
    out.insert(target.axis, x)
    return out


def realize_jet_hamiltonian(chart: RadialChart, target: CurveJet, k: int | None = None,
                            h_min: float = H_MIN, samples: int = 512, seed: int = 0) -> Realization:
    """Contact Hamiltonian whose ``R_h`` orbit through the jet's point has k-jet ``target``.

    Along the polynomial representative ``psi(x)`` (parametrized by the
    graph coordinate, reversed if ``alpha(psi') < 0``) the 1-jet of ``h`` is
    prescribed by ``h = alpha(psi')`` and
    ``grad h = M psi' + (d/dx alpha(psi') / alpha(psi')) a``; the second term
    is the component along the Reeb direction fixed by autonomy of ``h``.
    The extension off ``psi`` is affine on the slices ``{x = const}`` of the
    graph coordinate.

    Raises
    ------
    TransversalityError
        ``alpha(psi') = 0`` at the base point.
    NegativeHamiltonianError
        ``h <= h_min`` somewhere on the box even after one halving.
    """
    k = target.k if k is None else k
    target = target.truncate(k)
    if target.dim != chart.dim:
        raise ValueError(f"target jet lives in dimension {target.dim}, chart has {chart.dim}")
    names = chart.variables
    m = chart.dim
    ax = target.axis
    psi = representative(target, names)
    x = names[ax]
    dpsi = [ex.diff(c, x) for c in psi]
    at = {names[i]: psi[i] for i in range(m) if i != ax}
    a_on = [ex.substitute(e, at) for e in chart.alpha_exprs]
    M_on = [[ex.substitute(chart.dalpha_exprs[i][j], at) for j in range(m)] for i in range(m)]
    base_point = target.point()
    a0 = float(_program_values(ex.Program([sum_products(a_on, dpsi)], names), base_point)[0])
    if abs(a0) < RAY_TOL:
        raise TransversalityError(f"target tangent to the contact hyperplane: alpha(psi') = {a0:.2e}")
    sigma = 1.0 if a0 > 0 else -1.0
    H0 = sigma * sum_products(a_on, dpsi)
    dH0 = ex.diff(H0, x)                     # derivative in x; parameter s = sigma x
    c = (sigma * dH0) / H0
    G = []
    for i in range(m):
        gi = ex.ZERO
        for j in range(m):
            gi = gi + M_on[i][j] * (sigma * dpsi[j])
        G.append(gi + c * a_on[i])
    h = H0
    for i in range(m):
        if i != ax:
            h = h + G[i] * (ex.var(names[i]) - psi[i])
    ch = ContactHamiltonian(chart, h)
    box, shrunk = _validity_box(chart, ch, base_point, h_min, samples, seed)
    real = Realization(ch, target, base_point, box, int(sigma), shrunk)
    real.diagnostics = {"h_base": float(ch.value(base_point)), "alpha_dpsi": a0}
    return real


def sum_products(a, b) -> ex.Expr:
    out = ex.ZERO
    for x, y in zip(a, b):
        out = out + x * y
    return out


def _validity_box(chart, ch, base_point, h_min, samples, seed):
    """Chart box (or its half about the base point) on which ``h > h_min``."""
    lo = np.array([b[0] for b in chart.box])
    hi = np.array([b[1] for b in chart.box])
    rng = np.random.default_rng(seed)
    for attempt, shrink in enumerate((1.0, 0.5)):
        blo = base_point - shrink * (base_point - lo)
        bhi = base_point + shrink * (hi - base_point)
        W = blo + (bhi - blo) * rng.uniform(size=(samples, chart.dim))
        W = np.vstack([base_point, W])
        hv = ch.value(W)
        if np.all(np.isfinite(hv)) and np.min(hv) > h_min:
            return [(float(a), float(b)) for a, b in zip(blo, bhi)], attempt > 0
    raise NegativeHamiltonianError(f"h drops below h_min = {h_min} on the box and its half")


def autonomy_residual(real: Realization, count: int = 21) -> float:
    """``max |dh(psi') - d/dx alpha(psi')|`` along the representative near the base point."""
    chart = real.hamiltonian.chart
    names = chart.variables
    t = real.target
    psi = representative(t, names)
    x = names[t.axis]
    xs = t.base + np.linspace(-0.05, 0.05, count)
    prog = ex.Program(psi + [ex.diff(c, x) for c in psi], names)
    W0 = np.zeros((count, chart.dim))
    W0[:, t.axis] = xs
    vals = _program_values(prog, W0)
    P = np.stack(vals[: chart.dim], axis=-1)
    dP = np.stack(vals[chart.dim:], axis=-1)
    _, g = real.hamiltonian.value_and_gradient(P)
    lhs = np.sum(g * dP, axis=-1)
    # d/dx alpha(psi') by differentiating alpha(psi(x)) . psi'(x) with exact chart derivatives
    alpha_line = sum_products([ex.substitute(e, {names[i]: psi[i] for i in range(chart.dim) if i != t.axis})
                               for e in chart.alpha_exprs], [ex.diff(c, x) for c in psi])
    rhs_prog = ex.Program([ex.diff(alpha_line, x)], names)
    rhs = _program_values(rhs_prog, W0)[0] * real.orientation
    return float(np.max(np.abs(lhs - real.orientation * rhs)))


def random_target_jet(chart: RadialChart, k: int, rng, scale: float = 0.2, base_point=None) -> CurveJet:
    """Random jet at a chart point with coefficients ``y^(1..k)`` uniform in ``[-scale, scale]``."""
    w0 = chart.center if base_point is None else np.asarray(base_point, float)
    d = chart.dim
    coeffs = rng.uniform(-scale, scale, size=(k, d - 1))
    return CurveJet(0, float(w0[0]), np.delete(w0, 0).copy(), coeffs, k, 1)


def jet_map_submersivity_check(chart: RadialChart, h, k: int, n_directions: int | None = None,
                               base_point=None, seed: int = 0, step: float = 1e-3,
                               extra_directions: Sequence | None = None, zero_tol: float = 1e-10):
    """Sampled differential of ``h -> k-jet of the R_h orbit`` at a chart point.

    Perturbations ``delta h`` are random combinations of the monomials
    ``(w - w0)^beta`` with ``|beta| <= k + 1``; ``extra_directions`` adds
    user-supplied expressions.  Directions with zero gain (norm below
    ``zero_tol``) are excluded from the spanning frame.

    Returns
    -------
    dict with ``min_singular_value``, ``singular_values``, ``excluded`` and
    ``outputs`` (number of jet coordinates ``k (2n-2)``).
    """
    names = chart.variables
    w0 = chart.center if base_point is None else np.asarray(base_point, float)
    base_h = _h_expr(h, chart)
    m = chart.dim
    outputs = k * (m - 1)
    if n_directions is None:
        n_directions = 2 * outputs
    rng = np.random.default_rng(seed)
    from .series import monomials
    monos = [b for b in monomials(m, k + 1) if sum(b) > 0]
    mono_exprs = []
    for b in monos:
        e = ex.ONE
        for i, p in enumerate(b):
            for _ in range(p):
                e = e * (ex.var(names[i]) - float(w0[i]))
        mono_exprs.append(e)
    directions = []
    for _ in range(n_directions):
        c = rng.normal(size=len(mono_exprs))
        e = ex.ZERO
        for ci, mi in zip(c, mono_exprs):
            e = e + float(ci) * mi
        directions.append(e)
    for e in (extra_directions or []):
        directions.append(_h_expr(e, chart))

    def jet_vec(expr):
        j = ContactHamiltonian(chart, expr).orbit_jet(w0, k, 0)
        return j.coeffs.ravel()

    cols, excluded = [], []
    for idx, d in enumerate(directions):
        col = (jet_vec(base_h + step * d) - jet_vec(base_h - step * d)) / (2 * step)
        if np.linalg.norm(col) <= zero_tol:
            excluded.append(idx)
        else:
            cols.append(col)
    if not cols:
        return {"min_singular_value": 0.0, "singular_values": [], "excluded": excluded, "outputs": outputs}
    D = np.stack(cols, axis=1)
    s = np.linalg.svd(D, compute_uv=False)
    smin = float(s[outputs - 1]) if s.size >= outputs else 0.0
    return {"min_singular_value": smin, "singular_values": s.tolist(), "excluded": excluded,
            "outputs": outputs}
