"""Perturbations of Hamiltonians.

Two tools live here.  :func:`bump_perturb` adds a seeded, compactly
supported smooth modifier and is the generic-perturbation source for
dimension experiments.  :func:`resolve_intersection` removes an isolated
crossing of two projected orbits: one orbit is pushed off the crossing
point by a shear ``Phi_r`` of the base and the Hamiltonian is pulled back
by the cotangent lift of ``Phi_r`` inside a phase-space cutoff.

Tube coordinates around the displaced orbit use the tangent-line frame at
the crossing point: ``s`` runs along the orbit direction ``u``, ``nu`` is
the displacement direction and ``w`` the remaining normal coordinate(s).
The shear is ``Phi_r(x) = x + r beta(s, w) nu``; since ``beta`` does not
depend on the ``nu`` component, ``Phi_r`` is volume preserving and its
inverse is ``y - r beta(y) nu`` in closed form.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree

from . import expr as ex
from .flow import Orbit, integrate
from .hamsys import HamiltonianModel
from .subjets import isolation_radius, jet_derivative_bound, project_jet, tangency_order

ANGLE_SAMPLES = 64
RADIUS_STEPS = 20
CLEARANCE_MIN = 1e-3
COND_MAX = 1e6


class PlanError(ValueError):
    """The intersection cannot be resolved with the requested plan."""


class ResolutionError(RuntimeError):
    """No candidate radius passed verification."""


# ------------------------------------------------------------------ bumps

def bump_perturb(H: HamiltonianModel, center=None, amplitude: float = 1e-2, radius: float = 2.0,
                 seed: int = 0, degree: int = 2) -> HamiltonianModel:
    """``H + amplitude * bump(|q - center|^2/radius^2) * poly(q, p)``.

    ``poly`` has uniform[-1, 1] coefficients on all monomials of degree
    ``<= degree`` in the phase variables, drawn from ``default_rng(seed)``.
    The modifier is smooth and vanishes identically for
    ``|q - center| >= radius``.
    """
    if amplitude == 0:
        return H
    if radius <= 0:
        raise ValueError("bump radius must be positive")
    n = H.n
    rng = np.random.default_rng(seed)
    v = [ex.var(s) for s in H.variables]
    c = np.zeros(n) if center is None else np.asarray(center, float)
    s = ex.ZERO
    for i in range(n):
        s = s + (v[i] - float(c[i])) ** 2
    s = s / radius ** 2
    poly = ex.const(rng.uniform(-1, 1))
    for t in _monomial_terms(2 * n, degree):
        m = ex.ONE
        for i in t:
            m = m * v[i]
        poly = poly + float(rng.uniform(-1, 1)) * m
    name = f"{H.name}+bump(a={amplitude:g},R={radius:g},seed={seed})"
    return HamiltonianModel(H.expr + amplitude * ex.bump(s) * poly, n, name, H.periods)


def _monomial_terms(nvars, degree, prefix=(), start=0):
    """Index tuples of monomials in depth-first order (fixes the RNG assignment)."""
    for i in range(start, nvars):
        t = prefix + (i,)
        yield t
        if len(t) < degree:
            yield from _monomial_terms(nvars, degree, t, i)


# ------------------------------------------------------------------ plans

@dataclass
class ResolutionPlan:
    """Tube geometry and candidate radii for resolving one crossing."""

    q_star: np.ndarray
    t_star: float
    u: np.ndarray                 # orbit direction at q*
    normals: np.ndarray           # (n-1, n) orthonormal normal frame
    theta: float
    nu: np.ndarray                # displacement direction
    radii: list[float]
    eps: float                    # along-orbit half width of the shear support
    width: float                  # transverse half width of the shear support
    rho: float                    # momentum radius of the phase-space cutoff
    p_star: np.ndarray
    isolation: float
    angle_scores: np.ndarray = field(repr=False)
    blocked: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "q_star": self.q_star.tolist(), "t_star": self.t_star, "theta": self.theta,
            "nu": self.nu.tolist(), "radii": list(self.radii), "eps": self.eps,
            "width": self.width, "rho": self.rho, "isolation_radius": self.isolation,
        }


def _other_normals(u, nu):
    """Orthonormal complement of ``span(u, nu)``, shape ``(n-2, n)``."""
    A = np.vstack([u, nu])
    _, _, vt = np.linalg.svd(A)
    return vt[2:]


def _normal_frame(u):
    _, _, vt = np.linalg.svd(u[None, :])
    return vt[1:]


def _crossing_chart(H: HamiltonianModel, z1, z2):
    """``H`` in rotated base coordinates whose first axis bisects both velocities.

    The rotation ``R`` acts on ``q`` and, being orthogonal, identically on
    ``p`` (its cotangent lift), so both projected orbits are graphs over
    the first axis with equal margin.
    """
    n = H.n
    v1 = H.vector_field(z1)[:n]
    v2 = H.vector_field(z2)[:n]
    v1, v2 = v1 / np.linalg.norm(v1), v2 / np.linalg.norm(v2)
    a = v1 + v2 if v1 @ v2 >= 0 else v1 - v2
    a /= np.linalg.norm(a)
    _, _, vt = np.linalg.svd(a[None, :])
    R = np.vstack([a, vt[1:]]).T          # columns: new axes in old coordinates
    if np.linalg.det(R) < 0:
        R[:, -1] *= -1
    qv = [ex.var(f"q{i + 1}") for i in range(n)]
    pv = [ex.var(f"p{i + 1}") for i in range(n)]
    mapping = {}
    for i in range(n):
        qi, pi = ex.ZERO, ex.ZERO
        for j in range(n):
            if R[i, j] != 0:
                qi = qi + float(R[i, j]) * qv[j]
                pi = pi + float(R[i, j]) * pv[j]
        mapping[f"q{i + 1}"] = qi
        mapping[f"p{i + 1}"] = pi
    return HamiltonianModel(ex.substitute(H.expr, mapping), n, H.name + " (rotated)"), R


def _rotate_z(z, R):
    n = R.shape[0]
    return np.concatenate([R.T @ z[:n], R.T @ z[n:]])


def _locate(orbit: Orbit, q_star) -> float:
    """Time at which the projected orbit passes closest to ``q_star``."""
    q = orbit.z[:, : orbit.n]
    i = int(np.argmin(np.linalg.norm(q - q_star, axis=1)))
    lo = orbit.t[max(i - 1, 0)]
    hi = orbit.t[min(i + 1, len(orbit) - 1)]
    if hi <= lo:
        return float(orbit.t[i])
    res = minimize_scalar(lambda t: float(np.sum((orbit.base_path(t) - q_star) ** 2)),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-14})
    return float(res.x)


def _sample_curve(orbit: Orbit, step: float) -> np.ndarray:
    """Base points along the orbit with arclength spacing at most ``step``."""
    q = orbit.z[:, : orbit.n]
    seg = np.linalg.norm(np.diff(q, axis=0), axis=1)
    ts = [orbit.t[:1]]
    for i, L in enumerate(seg):
        m = max(1, int(math.ceil(L / step)))
        ts.append(np.linspace(orbit.t[i], orbit.t[i + 1], m + 1)[1:])
    return orbit.base_path(np.concatenate(ts))


def _shear_profile(s, w2, eps, width):
    """Numeric ``beta``: plateau in ``s^2/eps^2`` times plateau in ``|w|^2/width^2``."""
    return _plateau_num(s * s / eps ** 2) * _plateau_num(w2 / width ** 2)


def _plateau_num(x, inner=0.5):
    x = np.asarray(x, float)
    with np.errstate(all="ignore"):
        a = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1 - x, 1.0)), 0.0)
        b = np.where(x > inner, np.exp(-1.0 / np.where(x > inner, x - inner, 1.0)), 0.0)
        out = np.where(a > 0, a / (a + b), 0.0)
    return out


def plan_resolution(orbits: Sequence[Orbit], q_star, angle_samples: int = ANGLE_SAMPLES,
                    clearance_min: float = CLEARANCE_MIN, eps: float | None = None,
                    r0: float | None = None, steps: int = RADIUS_STEPS,
                    target: int = 0) -> ResolutionPlan:
    """Choose a displacement direction and radii for the crossing at ``q_star``.

    ``orbits[target]`` is displaced; every other orbit is treated as fixed.
    Each sampled angle is scored by the smallest relative clearance
    ``dist / r`` between the swept displaced curves and the fixed curves;
    the best angle wins.  Radii ``r0 * 2^-k`` whose displaced curve keeps a
    clearance of at least ``clearance_min`` are retained.  By default ``r0``
    is half the distance from the shear window to the bystanders (orbits
    not through ``q_star``), at most the shear width.

    Raises
    ------
    PlanError
        Base dimension below 3, a tangential crossing, or no admissible radius.
    """
    gamma = orbits[target]
    n = gamma.n
    if n < 3:
        raise PlanError("displacing an orbit off a crossing needs base dimension >= 3")
    others = [o for i, o in enumerate(orbits) if i != target]
    q_star = np.asarray(q_star, float)
    t_star = _locate(gamma, q_star)
    z_star = gamma.evaluate(t_star)
    qdot = gamma.H.vector_field(z_star)[:n]
    speed = float(np.linalg.norm(qdot))
    u = qdot / speed

    # isolation of the crossing against each orbit through q*
    iso = math.inf
    partner_p = []
    for o in others:
        ts = _locate(o, q_star)
        zo = o.evaluate(ts)
        if np.linalg.norm(zo[:n] - q_star) > 1e-6:
            continue
        partner_p.append(zo[n:])
        Hc, R = _crossing_chart(gamma.H, z_star, zo)
        a, b = _rotate_z(z_star, R), _rotate_z(zo, R)
        j1, j2 = project_jet(Hc, a, 2, axis=0), project_jet(Hc, b, 2, axis=0)
        r = tangency_order(j1, j2)
        if r != 1:
            raise PlanError(f"crossing is not transverse (tangency order {r})")
        M = jet_derivative_bound(Hc, np.vstack([a, b]), 0, r + 1)
        iso = min(iso, isolation_radius(j1, j2, r, M, window=1.0))
    if eps is None:
        eps = 0.5 * min(iso, 1.0)
    p_star = z_star[n:]
    gaps = [np.linalg.norm(p - p_star) for p in partner_p]
    rho = 0.5 * min(gaps) if gaps else 0.5
    width = eps

    frame = _normal_frame(u)
    thetas = 2 * np.pi * np.arange(angle_samples) / angle_samples
    step = clearance_min / 4
    curves = [_sample_curve(o, step) for o in others]
    fixed = np.vstack(curves) if others else np.zeros((0, n))
    near = fixed[np.linalg.norm(fixed - q_star, axis=1) <= 3 * eps] if fixed.size else fixed
    tree = cKDTree(near) if near.shape[0] else None
    # sweep samples over the shear window
    t_lo, t_hi = gamma.window
    ws = np.linspace(max(t_lo, t_star - 1.2 * eps / speed), min(t_hi, t_star + 1.2 * eps / speed),
                     max(16, int(2.4 * eps / step) + 1))
    base = gamma.base_path(ws)
    if r0 is None:
        # half the clearance to bystanders, capped so the image stays on the plateau of chi
        partner = [np.linalg.norm(o.base_path(_locate(o, q_star)) - q_star) <= 1e-6 for o in others]
        clear = min((_min_base_distance(base, c) for c, p in zip(curves, partner) if not p),
                    default=math.inf)
        r0 = min(0.5 * clear, width)
    radii_all = [r0 * 2.0 ** -k for k in range(steps + 1)]
    rel = base - q_star
    s = rel @ u

    scores = np.empty(angle_samples)
    for a, th in enumerate(thetas):
        nu = math.cos(th) * frame[0] + math.sin(th) * frame[1]
        wv = rel - np.outer(s, u) - np.outer(rel @ nu, nu)
        beta = _shear_profile(s, np.sum(wv * wv, axis=1), eps, width)
        worst = math.inf
        if tree is not None:
            for r in radii_all:
                # only distances below the running score matter; bounded queries are much cheaper
                ub = min(worst * r, 3 * eps)
                d, _ = tree.query(base + r * beta[:, None] * nu, distance_upper_bound=ub)
                worst = min(worst, float(np.min(d)) / r, 3 * eps / r)
        scores[a] = worst
    best = int(np.argmax(scores))
    theta = float(thetas[best])
    nu = math.cos(theta) * frame[0] + math.sin(theta) * frame[1]
    wv = rel - np.outer(s, u) - np.outer(rel @ nu, nu)
    beta = _shear_profile(s, np.sum(wv * wv, axis=1), eps, width)

    radii = []
    for r in radii_all:
        if tree is None:
            radii.append(r)
            continue
        d, _ = tree.query(base + r * beta[:, None] * nu, distance_upper_bound=clearance_min)
        if float(np.min(d)) >= clearance_min:
            radii.append(r)
    # eps-balls at the window ends must avoid the fixed curves other than crossing partners
    ends = gamma.base_path(np.clip([t_star - eps / speed, t_star + eps / speed], t_lo, t_hi))
    for o in others:
        if np.linalg.norm(o.base_path(_locate(o, q_star)) - q_star) <= 1e-6:
            continue
        pts = _sample_curve(o, step)
        if np.min(np.linalg.norm(pts[:, None, :] - ends[None], axis=2)) < eps:
            raise PlanError("a fixed orbit enters an end ball of the shear window; reduce eps")
    if not radii:
        raise PlanError("no collision-free radius within budget; refine sampling or reduce r0")
    blocked = [int(i) for i in np.nonzero(scores <= 0.5 * scores[best])[0]]
    return ResolutionPlan(q_star, t_star, u, frame, theta, nu, radii, float(eps), float(width),
                          float(rho), p_star, float(iso), scores, blocked)


# ------------------------------------------------------------ displacement

@dataclass(frozen=True)
class Displacement:
    """The shear ``Phi_r(x) = x + r beta(x) nu`` with symbolic ``beta``."""

    plan: ResolutionPlan
    r: float
    beta: ex.Expr = field(repr=False)
    n: int

    def _beta(self, x):
        pl = self.plan
        rel = np.asarray(x, float) - pl.q_star
        s = rel @ pl.u
        wv = rel - np.multiply.outer(s, pl.u) - np.multiply.outer(rel @ pl.nu, pl.nu)
        return _shear_profile(s, np.sum(wv * wv, axis=-1), pl.eps, pl.width)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return x + self.r * self._beta(x)[..., None] * self.plan.nu

    def inverse(self, y) -> np.ndarray:
        y = np.asarray(y, float)
        return y - self.r * self._beta(y)[..., None] * self.plan.nu

    def support_contains(self, x) -> np.ndarray:
        return self._beta(x) > 0


def _tube_exprs(plan: ResolutionPlan, qv):
    rel = [qv[i] - float(plan.q_star[i]) for i in range(len(qv))]

    def dot(c):
        out = ex.ZERO
        for ci, ri in zip(c, rel):
            if ci != 0:
                out = out + float(ci) * ri
        return out

    s = dot(plan.u)
    w2 = ex.ZERO
    for e in _other_normals(plan.u, plan.nu):
        w2 = w2 + dot(e) ** 2
    v = dot(plan.nu)
    return s, w2, v, rel


def build_displacement(plan: ResolutionPlan, r: float) -> Displacement:
    """Shear displacement at radius ``r`` (``r = 0`` is the identity).

    Raises
    ------
    PlanError
        If ``r`` exceeds the plan's largest radius (support overflow).
    """
    if r < 0 or r > plan.radii[0] * (1 + 1e-12):
        raise PlanError(f"radius {r} outside the validated range (0, {plan.radii[0]}]")
    qv = [ex.var(f"q{i + 1}") for i in range(plan.q_star.size)]
    s, w2, _, _ = _tube_exprs(plan, qv)
    beta = ex.plateau(s * s / plan.eps ** 2) * ex.plateau(w2 / plan.width ** 2)
    return Displacement(plan, float(r), beta, plan.q_star.size)


@dataclass
class PerturbedHamiltonian:
    """Cutoff blend of ``H`` and its pullback under the lifted shear."""

    base: HamiltonianModel
    model: HamiltonianModel
    r: float
    cutoff: ex.Expr = field(repr=False)
    distances: dict = field(default_factory=dict)
    orbits: list = field(default_factory=list, repr=False)  # verified H_r orbits, same order as input


def cutoff_expr(plan: ResolutionPlan, n: int) -> ex.Expr:
    """Phase-space cutoff ``chi``: 1 near the displaced orbit segment, 0 away.

    Its base support is twice the shear window, so ``chi = 1`` wherever the
    shear moves the orbit; the momentum factor keeps orbits crossing with a
    different covector outside.
    """
    qv = [ex.var(f"q{i + 1}") for i in range(n)]
    pv = [ex.var(f"p{i + 1}") for i in range(n)]
    s, w2, v, _ = _tube_exprs(plan, qv)
    d2 = w2 + v * v
    m2 = ex.ZERO
    for i in range(n):
        m2 = m2 + (pv[i] - float(plan.p_star[i])) ** 2
    return (ex.plateau(s * s / (2 * plan.eps) ** 2) * ex.plateau(d2 / (2 * plan.width) ** 2)
            * ex.plateau(m2 / plan.rho ** 2))


def _support_step_cap(plan: ResolutionPlan, H: HamiltonianModel, near_step: float):
    """Step cap ``z -> h``: ``near_step`` close to the cutoff support, larger far from it.

    The support lies in ``|q - q*| <= 2 sqrt(eps^2 + width^2)`` and
    ``|p - p*| <= rho``; away from it ``H_r = H``, so half the phase
    distance over the current speed cannot reach the support.
    """
    n = H.n
    rq = 2.0 * math.hypot(plan.eps, plan.width)

    def cap(z):
        dq = float(np.linalg.norm(z[:n] - plan.q_star)) - rq
        dp = float(np.linalg.norm(z[n:] - plan.p_star)) - plan.rho
        gap = max(dq, dp)
        if gap <= 0:
            return near_step
        speed = float(np.linalg.norm(H.vector_field(z)))
        return max(near_step, 0.5 * gap / max(speed, 1e-12))

    return cap


def pullback_hamiltonian(H: HamiltonianModel, phi: Displacement, cutoff: ex.Expr | None = None,
                         cond_max: float = COND_MAX) -> PerturbedHamiltonian:
    """``H_r = gate(chi, chi * H o L^-1 + (1 - chi) H, H)``.

    ``L`` is the cotangent lift of ``phi``; with ``y = phi(x)`` one has
    ``L^-1(y, eta) = (phi^-1(y), D phi(phi^-1 y)^T eta)``, and the shear
    structure gives ``D phi(phi^-1 y)^T eta = eta + r (nu . eta) grad beta(y)``.
    Off the support of ``chi`` the expression is ``H`` itself.

    Raises
    ------
    PlanError
        If ``D phi`` is too badly conditioned on the support.
    """
    n = H.n
    plan = phi.plan
    if cutoff is None:
        cutoff = cutoff_expr(plan, n)
    if phi.r == 0:
        return PerturbedHamiltonian(H, H, 0.0, cutoff)
    qn = [f"q{i + 1}" for i in range(n)]
    qv = [ex.var(s) for s in qn]
    pv = [ex.var(f"p{i + 1}") for i in range(n)]
    grad_beta = ex.gradient(phi.beta, qn)
    gmax = _grad_beta_bound(plan)
    cond = (1 + phi.r * gmax) ** 2
    if cond > cond_max:
        raise PlanError(f"D Phi condition estimate {cond:.2e} exceeds {cond_max:.1e}")
    nu_eta = ex.ZERO
    for i in range(n):
        if plan.nu[i] != 0:
            nu_eta = nu_eta + float(plan.nu[i]) * pv[i]
    mapping = {}
    for i in range(n):
        mapping[f"q{i + 1}"] = qv[i] - (phi.r * float(plan.nu[i])) * phi.beta
        mapping[f"p{i + 1}"] = pv[i] + phi.r * nu_eta * grad_beta[i]
    pulled = ex.substitute(H.expr, mapping)
    chi = cutoff
    blended = ex.gate(chi, chi * pulled + (1 - chi) * H.expr, H.expr)
    model = HamiltonianModel(blended, n, f"{H.name} resolved(r={phi.r:g})", H.periods)
    return PerturbedHamiltonian(H, model, phi.r, chi)


def _grad_beta_bound(plan: ResolutionPlan) -> float:
    x = np.linspace(0, 1, 2001)
    d = np.abs(np.gradient(_plateau_num(x * x), x))
    return float(2 * np.max(d) / min(plan.eps, plan.width))


def sampled_distances(Hr: HamiltonianModel, H: HamiltonianModel, points: np.ndarray) -> dict:
    """Sampled C0, C1 and C2 distances of ``Hr`` to ``H`` over ``points``."""
    d0 = np.abs(Hr.value(points) - H.value(points))
    d1 = np.linalg.norm(Hr.gradient(points) - H.gradient(points), axis=-1)
    d2 = np.array([np.linalg.norm(Hr.hessian(z) - H.hessian(z), 2) for z in points])
    return {"c0_dist": float(np.max(d0)), "c1_dist": float(np.max(d1)),
            "c2_dist_estimate": float(np.max(d2))}


def _support_samples(plan: ResolutionPlan, n: int, count: int = 400, seed: int = 0) -> np.ndarray:
    """Phase points spread over the support of the cutoff."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-2 * plan.eps, 2 * plan.eps, count)
    off = rng.normal(size=(count, n))
    off -= np.outer(off @ plan.u, plan.u)
    off *= (2 * plan.width * rng.uniform(0, 1, count) / np.maximum(np.linalg.norm(off, axis=1), 1e-300))[:, None]
    q = plan.q_star + np.outer(s, plan.u) + off
    dp = rng.normal(size=(count, n))
    dp *= (plan.rho * rng.uniform(0, 1, count) / np.linalg.norm(dp, axis=1))[:, None]
    return np.concatenate([q, plan.p_star + dp], axis=1)


# -------------------------------------------------------------- resolve

def _min_base_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[0] == 0 or b.shape[0] == 0:
        return math.inf
    d, _ = cKDTree(b).query(a)
    return float(np.min(d))


def _crossing_free(orbits, q_star, radius, step, clearance_min):
    pts = []
    for o in orbits:
        c = _sample_curve(o, step)
        pts.append(c[np.linalg.norm(c - q_star, axis=1) <= radius])
    worst = math.inf
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            worst = min(worst, _min_base_distance(pts[i], pts[j]))
    return worst


def resolve_intersection(H: HamiltonianModel, orbits: Sequence[Orbit], q_star, target: int = 0,
                         angle_samples: int = ANGLE_SAMPLES, clearance_min: float = CLEARANCE_MIN,
                         eps: float | None = None, r0: float | None = None,
                         steps: int = RADIUS_STEPS, image_tol: float = 1e-6,
                         bystander_tol: float = 1e-9, max_step: float | None = None):
    """Displace ``orbits[target]`` off the crossing at ``q_star``.

    Radii are tried from largest to smallest.  A radius passes when the
    re-integrated orbits of ``H_r`` keep base distance ``>= clearance_min``
    near ``q_star``, the displaced orbit follows ``Phi_r`` of the original
    to ``image_tol``, and every other orbit is reproduced to
    ``bystander_tol``.

    Returns
    -------
    (PerturbedHamiltonian, dict)
        The accepted Hamiltonian and the verification report.

    Raises
    ------
    ResolutionError
        If every radius fails.
    """
    t_start = time.perf_counter()
    n = H.n
    q_star = np.asarray(q_star, float)
    step = clearance_min / 4
    window_radius = None
    before = _crossing_free(orbits, q_star, 1.0, step, clearance_min)
    if before >= clearance_min:
        report = {"q_star": q_star.tolist(), "theta_star": None, "r_selected": 0.0,
                  "clearance": before, "c0_dist": 0.0, "c1_dist": 0.0, "c2_dist_estimate": 0.0,
                  "sweep_stats": {"already_disjoint": True}, "config": {"clearance_min": clearance_min}}
        return PerturbedHamiltonian(H, H, 0.0, ex.ZERO), report
    plan = plan_resolution(orbits, q_star, angle_samples, clearance_min, eps, r0, steps, target)
    window_radius = 2 * plan.eps
    gamma = orbits[target]
    chi = cutoff_expr(plan, n)
    samples = _support_samples(plan, n)
    # Taylor tails cannot see the edge of a flat cutoff; cap the step near it
    mstep = max_step if max_step is not None else plan.eps / 50
    cap = _support_step_cap(plan, H, mstep)
    history = []
    accepted = None
    for r in plan.radii:
        phi = build_displacement(plan, r)
        pert = pullback_hamiltonian(H, phi, chi)
        Hr = pert.model
        new = []
        for o in orbits:
            new.append(integrate(Hr, o.z[0], (o.t[0], o.t[-1]), order=8, max_step=cap))
        # image property on the displaced orbit
        tt = np.linspace(*gamma.window, 2001)
        image_err = float(np.max(np.abs(new[target].base_path(tt) - phi(gamma.base_path(tt)))))
        by_err = 0.0
        for i, o in enumerate(orbits):
            if i == target:
                continue
            by_err = max(by_err, float(np.max(np.abs(new[i].evaluate(o.t) - o.z))))
        clearance = _crossing_free(new, q_star, window_radius, step, clearance_min)
        dist = sampled_distances(Hr, H, samples)
        pert.distances = dist
        entry = {"r": r, "clearance": clearance, "image_error": image_err,
                 "bystander_error": by_err, **dist}
        history.append(entry)
        if clearance >= clearance_min and image_err <= image_tol and by_err <= bystander_tol:
            accepted = (pert, entry, new)
            break
    if accepted is None:
        raise ResolutionError(f"no radius among {len(plan.radii)} passed verification: {history[-1]}")
    pert, entry, new = accepted
    pert.orbits = new
    report = {
        "q_star": q_star.tolist(),
        "theta_star": plan.theta,
        "r_selected": entry["r"],
        "clearance": entry["clearance"],
        "c0_dist": entry["c0_dist"],
        "c1_dist": entry["c1_dist"],
        "c2_dist_estimate": entry["c2_dist_estimate"],
        "sweep_stats": {
            "arclength_step": step, "tube_radius": window_radius, "candidates_tried": len(history),
            "image_error": entry["image_error"], "bystander_error": entry["bystander_error"],
            "clearance_before": before, "blocked_angles": len(plan.blocked),
            "history": history,
        },
        "plan": plan.to_record(),
        "config": {"clearance_min": clearance_min, "angle_samples": angle_samples,
                   "radius_steps": steps, "image_tol": image_tol, "bystander_tol": bystander_tol,
                   "max_step": mstep, "cond_max": COND_MAX},
        "runtime": time.perf_counter() - t_start,
    }
    return pert, report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=float)
