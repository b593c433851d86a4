"""Taylor-method integration of Hamiltonian flows on the level ``H = 0``.

Each step expands the orbit in a Taylor series (same recurrence as the jet
computations), picks the step from the decay of the last two coefficients,
and Newton-projects the new point back onto the level along ``grad H``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hamsys import (SUBMERSION_TOL, HamiltonianModel, LevelPoint, PhasePoint,
                     VerticalTangencyError, _as_z, certify_level_point, project_to_level)
from .subjets import orbit_taylor

ORDER = 12
DRIFT_TOL = 1e-9
STEP_TOL = 1e-16
CHORD_TOL = 1e-10
MAX_STEPS = 100000


class FlowError(RuntimeError):
    """Integration failed (step-size underflow or non-finite state)."""


class ShootingError(RuntimeError):
    """Chord shooting did not converge; ``residual`` holds the last value."""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")


class ConjugatePointError(ShootingError):
    """The shooting Jacobian is singular; the endpoints may be conjugate."""


@dataclass(frozen=True)
class Orbit:
    """A computed orbit segment with dense Taylor output.

    ``t`` is strictly increasing, ``z[i]`` is the (projected) state at
    ``t[i]``.  Step ``i`` covers ``[t[i], t[i+1]]`` and is represented by
    the Taylor polynomial ``dense[i]`` centred at ``centers[i]``.
    """

    H: HamiltonianModel = field(repr=False)
    t: np.ndarray
    z: np.ndarray
    residual: np.ndarray
    dense: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.H.n

    @property
    def window(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual))

    def __len__(self):
        return self.t.size

    def level_point(self, i: int) -> LevelPoint:
        z = self.z[i]
        xh = self.H.vector_field(z)
        return LevelPoint(PhasePoint.from_z(z), float(self.residual[i]), xh, xh[: self.n].copy())

    @property
    def samples(self) -> list[tuple[float, LevelPoint]]:
        return [(float(self.t[i]), self.level_point(i)) for i in range(len(self))]

    def evaluate(self, t) -> np.ndarray:
        """Dense output at time(s) ``t``; exact at the sample times."""
        ts = np.asarray(t, dtype=float)
        flat = ts.reshape(-1)
        lo, hi = self.window
        if np.any((flat < lo - 1e-12 * max(1, abs(lo))) | (flat > hi + 1e-12 * max(1, abs(hi)))):
            raise ValueError("time outside the orbit window")
        idx = np.clip(np.searchsorted(self.t, flat, side="right") - 1, 0, len(self.t) - 2)
        out = np.empty((flat.size, self.z.shape[1]))
        for m, (i, s) in enumerate(zip(idx, flat)):
            if s == self.t[i]:
                out[m] = self.z[i]
            elif s == self.t[i + 1]:
                out[m] = self.z[i + 1]
            else:
                tau = s - self.centers[i]
                c = self.dense[i]
                v = c[-1]
                for j in range(c.shape[0] - 2, -1, -1):
                    v = v * tau + c[j]
                out[m] = v
        return out.reshape(ts.shape + (self.z.shape[1],))

    def base_path(self, t) -> np.ndarray:
        return self.evaluate(t)[..., : self.n]

    def to_csv(self, path_or_buffer=None) -> str:
        """Orbit table with columns t, q1..qn, p1..pn, energy_residual."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.n
        w.writerow(["t"] + [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
                   + ["energy_residual"])
        for ti, zi, ri in zip(self.t, self.z, self.residual):
            w.writerow([repr(float(ti))] + [repr(float(v)) for v in zi] + [repr(float(ri))])
        text = buf.getvalue()
        if path_or_buffer is not None:
            if hasattr(path_or_buffer, "write"):
                path_or_buffer.write(text)
            else:
                with open(path_or_buffer, "w", newline="") as fh:
                    fh.write(text)
        return text


def _step_size(coeffs: np.ndarray, scale: float, tol: float) -> float:
    """Step from the tail of the Taylor expansion (last two coefficients)."""
    L = coeffs.shape[0] - 1
    h = np.inf
    for j in (L - 1, L):
        c = float(np.max(np.abs(coeffs[j])))
        if c > 0:
            h = min(h, (tol * scale / c) ** (1.0 / j))
    return 0.9 * h


def _project(H, z, iters=5):
    for _ in range(iters):
        h, g = H.value_and_gradient(z)
        if abs(h) <= 1e-15:
            break
        z = z - (h / (g @ g)) * g
    return z, float(abs(H.value(z)))


def integrate(H: HamiltonianModel, x0, window: Sequence[float], order: int = ORDER,
              drift_tol: float = DRIFT_TOL, step_tol: float = STEP_TOL,
              max_steps: int = MAX_STEPS, max_step: float | None = None,
              submersion_tol: float = SUBMERSION_TOL, wrap: bool = True) -> Orbit:
    """Integrate ``X_H`` from ``x0`` over ``window = (t0, t1)``.

    ``x0`` is taken to sit at time ``t0``; ``t1 < t0`` integrates backward.
    The returned orbit is always stored in increasing time.

    Raises
    ------
    FlowError
        Step-size underflow, non-finite state, or drift above ``drift_tol``.
    VerticalTangencyError
        ``d pi_Q X_H`` degenerates along the orbit.
    """
    t0, t1 = float(window[0]), float(window[1])
    z = _as_z(x0).astype(float)
    if not isinstance(x0, LevelPoint):
        z = certify_level_point(H, z).z
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    hmin = 1e-13 * max(1.0, span)
    ts, zs, res, dense, centers = [t0], [z], [float(abs(H.value(z)))], [], []
    t = t0
    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= max_steps:
            raise FlowError(f"maximum number of steps ({max_steps}) reached at t={t}")
        coeffs = orbit_taylor(H, z, order)
        if not np.all(np.isfinite(coeffs)):
            raise FlowError(f"non-finite Taylor coefficients at t={t}")
        h = _step_size(coeffs, max(1.0, float(np.max(np.abs(z)))), step_tol)
        if max_step is not None:
            h = min(h, max_step(z) if callable(max_step) else max_step)
        remaining = abs(t1 - t)
        if h >= remaining:
            h = remaining
        elif h < hmin:
            raise FlowError(f"step size underflow ({h:.3e}) at t={t}")
        tau = direction * h
        v = coeffs[-1]
        for j in range(order - 1, -1, -1):
            v = v * tau + coeffs[j]
        znew, r = _project(H, v)
        if not np.all(np.isfinite(znew)):
            raise FlowError(f"non-finite state at t={t + tau}")
        if r > drift_tol:
            raise FlowError(f"energy drift {r:.3e} exceeds {drift_tol:.1e} at t={t + tau}")
        qdot = H.vector_field(znew)[: H.n]
        if np.linalg.norm(qdot) <= submersion_tol:
            raise VerticalTangencyError(f"d pi_Q X_H vanishes at t={t + tau}")
        dense.append(coeffs)
        centers.append(t)
        t = t1 if h == remaining else t + tau
        if wrap and any(p is not None for p in H.periods):
            znew = H.wrap(znew)
        z = znew
        ts.append(t)
        zs.append(znew)
        res.append(r)
        steps += 1
    ts_a, zs_a, res_a = np.array(ts), np.array(zs), np.array(res)
    dense_a = np.array(dense) if dense else np.zeros((0, order + 1, z.size))
    centers_a = np.array(centers)
    if direction < 0:
        ts_a, zs_a, res_a = ts_a[::-1].copy(), zs_a[::-1].copy(), res_a[::-1].copy()
        dense_a, centers_a = dense_a[::-1].copy(), centers_a[::-1].copy()
    if ts_a.size == 1:
        # degenerate window: a single sample, constant dense output
        ts_a = np.array([t0, t0])
        zs_a = np.vstack([z, z])
        res_a = np.array([res[0], res[0]])
        dense_a = np.zeros((1, order + 1, z.size))
        dense_a[0, 0] = z
        centers_a = np.array([t0])
    return Orbit(H, ts_a, zs_a, res_a, dense_a, centers_a)


def flow_endpoint(H: HamiltonianModel, z0, T: float, **kw) -> np.ndarray:
    return integrate(H, z0, (0.0, T), **kw).z[-1 if T >= 0 else 0]


@dataclass(frozen=True)
class Chord:
    """Orbit connecting the fibers over ``q_a`` and ``q_b``."""

    orbit: Orbit
    q_a: np.ndarray
    q_b: np.ndarray
    residual: float
    duration: float
    iterations: int

    @property
    def p_start(self) -> np.ndarray:
        return self.orbit.z[0, self.orbit.n:]


def _fiber_chart(H: HamiltonianModel, q_a, p0):
    """Smooth chart ``s -> p`` of the fiber level ``{H(q_a, .) = 0}`` near ``p0``."""
    n = H.n
    z0 = np.concatenate([q_a, p0])
    g = H.gradient(z0)[n:]
    normal = g / np.linalg.norm(g)
    # orthonormal complement of the normal inside the fiber
    _, _, vt = np.linalg.svd(normal[None, :])
    E = vt[1:].T

    def chart(s):
        p = p0 + E @ s
        z = np.concatenate([q_a, p])
        d = np.concatenate([np.zeros(n), normal])
        return project_to_level(H, z, direction=d, iters=30)

    return chart


def shoot_chord(H: HamiltonianModel, q_a, q_b, p_guess, T_guess: float,
                chord_tol: float = CHORD_TOL, max_iter: int = 30, fd_step: float = 1e-6,
                cond_max: float = 1e10, **integrate_kw) -> Chord:
    """Newton shooting for an orbit from the fiber over ``q_a`` to that over ``q_b``.

    Unknowns are the initial covector (``n-1`` fiber coordinates) and the
    duration; the residual is ``q(T) - q_b``.

    Raises
    ------
    ConjugatePointError
        Singular shooting Jacobian (condition number above ``cond_max``).
    ShootingError
        No convergence after ``max_iter`` iterations.
    """
    n = H.n
    q_a = np.asarray(q_a, float)
    q_b = np.asarray(q_b, float)
    z_guess = np.concatenate([q_a, np.asarray(p_guess, float)])
    g = H.gradient(z_guess)
    z_guess = project_to_level(H, z_guess, direction=np.concatenate([np.zeros(n), g[n:]]), iters=50)
    z_guess = certify_level_point(H, z_guess).z
    chart = _fiber_chart(H, q_a, z_guess[n:])
    u = np.zeros(n)  # (fiber coords, T offset)

    def F(u):
        z = chart(u[: n - 1])
        T = T_guess + u[n - 1]
        end = integrate(H, z, (0.0, T), **integrate_kw).z[-1]
        return H.base_difference(end[:n], q_b)

    r = F(u)
    for it in range(max_iter + 1):
        norm = float(np.linalg.norm(r))
        if norm <= chord_tol:
            z = chart(u[: n - 1])
            T = T_guess + u[n - 1]
            orbit = integrate(H, z, (0.0, T), **integrate_kw)
            return Chord(orbit, q_a, q_b, norm, T, it)
        if it == max_iter:
            break
        J = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd_step
            J[:, i] = (F(u + e) - F(u - e)) / (2 * fd_step)
        if np.linalg.cond(J) > cond_max:
            raise ConjugatePointError("singular shooting Jacobian (conjugate point suspected)", norm, it)
        step = np.linalg.solve(J, -r)
        lam = 1.0
        while True:
            r_new = F(u + lam * step)
            if np.linalg.norm(r_new) < norm or lam < 1e-4:
                break
            lam *= 0.5
        u = u + lam * step
        r = r_new
    raise ShootingError("chord shooting did not converge", float(np.linalg.norm(r)), max_iter)
