"""Homopodal pairs: points of the level whose projected orbits share a k-jet.

For a pair ``(x1, x2)`` of level points the residual is the difference of
the base points (``n`` entries) followed by the differences of the graph
derivatives ``y^(1..k)`` on a common axis (``k(n-1)`` entries), so it has
``kn + n - k`` components.  The pair is moved in on-level charts: each
point gets an orthonormal frame of ``ker dH`` (``2n-1`` directions) and
displaced points are pushed back onto the level along the fixed unit
normal, which makes the chart smooth.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .hamsys import (HamiltonianModel, LevelPoint, _as_z, certify_level_point,
                     level_basis, project_to_level)
from .subjets import (AXIS_MARGIN, ChartMismatchError, choose_axis, graph_derivatives,
                      orbit_taylor)

DIAG_MARGIN = 1e-3
SOLVE_TOL = 1e-9
RANK_TOL = 1e-6
AMBIGUITY_FACTOR = 10.0
DEDUP_EPS = 1e-4
ALIGN_TOL = 1e-6
FD_STEP = 1e-7          # forward differences inside the solver
RANK_STEP = 1e-5        # central differences for the rank estimate
MAX_ITER = 40
AMBIGUOUS = "rank-deficient-ambiguous"


class DiagonalError(ValueError):
    """The two points are closer than ``diag_margin`` in phase space."""


class AlignmentError(ValueError):
    """Base velocities are not parallel: the pair is not order-1 homopodal."""


class NoConvergence(RuntimeError):
    def __init__(self, message: str, history: Sequence[float]):
        self.history = list(history)
        super().__init__(message)


def residual_dimension(n: int, k: int) -> int:
    return k * n + n - k


def formula_dimension(n: int, k: int) -> int:
    """Expected dimension ``(3-k)(n-1)+1`` of the order-k homopodal set."""
    return (3 - k) * (n - 1) + 1


# ---------------------------------------------------------------- residual

def pair_residuals(H: HamiltonianModel, Z1, Z2, k: int, axes, axis_margin: float = AXIS_MARGIN):
    """Batched residuals for pairs ``Z1[i], Z2[i]`` on graph axes ``axes[i]``.

    Returns an array ``(B, kn+n-k)``; rows whose jets violate the axis margin
    are NaN.
    """
    Z1 = np.atleast_2d(np.asarray(Z1, float))
    Z2 = np.atleast_2d(np.asarray(Z2, float))
    B = Z1.shape[0]
    n = H.n
    axes = np.broadcast_to(np.asarray(axes, dtype=int), (B,))
    dq = H.base_difference(Z1[:, :n], Z2[:, :n])
    if k == 0:
        return dq
    series = orbit_taylor(H, np.concatenate([Z1, Z2]), k)
    q = series[..., :n]
    ax2 = np.concatenate([axes, axes])
    perm = np.empty((2 * B, n), dtype=int)
    perm[:, 0] = ax2
    others = np.array([[j for j in range(n) if j != a] for a in range(n)])
    perm[:, 1:] = others[ax2]
    qp = np.take_along_axis(q, np.broadcast_to(perm[None], q.shape), axis=-1)
    _, y, speed = graph_derivatives(qp, 0, k)
    vnorm = np.linalg.norm(q[1], axis=-1)
    bad = ~(np.abs(speed) >= axis_margin * vnorm)
    dy = y[1:, :B] - y[1:, B:]                      # (k, B, n-1)
    F = np.concatenate([dq, np.moveaxis(dy, 0, 1).reshape(B, k * (n - 1))], axis=1)
    F[bad[:B] | bad[B:]] = np.nan
    return F


def homopodal_residual(H: HamiltonianModel, x1, x2, k: int, axis: int | None = None,
                       diag_margin: float = DIAG_MARGIN, axis_margin: float = AXIS_MARGIN) -> np.ndarray:
    """Residual vector in R^(kn+n-k); zero iff the projected k-jets coincide.

    Raises
    ------
    DiagonalError
        ``|x1 - x2| < diag_margin``.
    ChartMismatchError
        No common graph axis satisfies the margin for both points.
    """
    z1, z2 = _as_z(x1), _as_z(x2)
    if np.linalg.norm(z1 - z2) < diag_margin:
        raise DiagonalError("pair lies within diag_margin of the diagonal")
    if axis is None:
        axis = choose_axis(H.vector_field(z1)[: H.n])
    F = pair_residuals(H, z1, z2, k, axis, axis_margin)[0]
    if np.any(np.isnan(F)):
        raise ChartMismatchError(f"axis {axis + 1} violates the margin for one of the points")
    return F


# ------------------------------------------------------------ chart moves

@dataclass
class _Frame:
    z: np.ndarray        # (B, 2, 2n) current pair
    basis: np.ndarray    # (B, 2, 2n, 2n-1)
    normal: np.ndarray   # (B, 2, 2n)


def _frame(H: HamiltonianModel, Z: np.ndarray) -> _Frame:
    g = H.gradient(Z)
    normal = g / np.linalg.norm(g, axis=-1, keepdims=True)
    return _Frame(Z, level_basis(g), normal)


def _move(H: HamiltonianModel, fr: _Frame, delta: np.ndarray, idx=None) -> np.ndarray:
    """Chart map: pairs displaced by ``delta`` (..., 2(2n-1)) then projected."""
    z, basis, normal = (fr.z, fr.basis, fr.normal) if idx is None else \
        (fr.z[idx], fr.basis[idx], fr.normal[idx])
    m = basis.shape[-1]
    d = np.stack([delta[..., :m], delta[..., m:]], axis=-2)           # (..., 2, m)
    zt = z + np.einsum("...ij,...j->...i", basis, d)
    return project_to_level(H, zt, direction=np.broadcast_to(normal, zt.shape), iters=6)


def _jacobian(H, fr: _Frame, k, axes, h, central: bool, F0=None, axis_margin=AXIS_MARGIN):
    B = fr.z.shape[0]
    d = 2 * fr.basis.shape[-1]
    E = np.eye(d)
    signs = (1.0, -1.0) if central else (1.0,)
    blocks = []
    for s in signs:
        delta = np.broadcast_to(s * h * E, (B, d, d))
        Zp = _move(H, _Frame(fr.z[:, None], fr.basis[:, None], fr.normal[:, None]), delta)
        Zp = Zp.reshape(B * d, 2, -1)
        Fp = pair_residuals(H, Zp[:, 0], Zp[:, 1], k, np.repeat(axes, d), axis_margin)
        blocks.append(Fp.reshape(B, d, -1))
    if central:
        J = (blocks[0] - blocks[1]) / (2 * h)
    else:
        J = (blocks[0] - F0[:, None, :]) / h
    return np.swapaxes(J, 1, 2)  # (B, m, d)


# ----------------------------------------------------------------- pairs

@dataclass(frozen=True)
class HomopodalPair:
    x1: LevelPoint
    x2: LevelPoint
    k: int
    flavor: str
    residual_norm: float
    est_dim: object
    axis: int
    singular_values: np.ndarray = field(repr=False, default=None)

    def swapped(self) -> "HomopodalPair":
        return HomopodalPair(self.x2, self.x1, self.k, self.flavor, self.residual_norm,
                             self.est_dim, self.axis, self.singular_values)

    def to_record(self) -> dict:
        return {
            "x1": [float(v) for v in self.x1.z],
            "x2": [float(v) for v in self.x2.z],
            "k": self.k,
            "axis": self.axis + 1,
            "flavor": self.flavor,
            "residual": float(self.residual_norm),
            "dim": self.est_dim,
        }


def classify_flavor(H: HamiltonianModel, x1, x2, k: int = 1, align_tol: float = ALIGN_TOL) -> str:
    """``"iso"`` or ``"anti"`` from the sign of ``s`` in ``v1 = s v2``.

    ``v`` is the base velocity ``d pi_Q X_H``; ``s`` is the least-squares
    scalar.  Pairs with ``k = 0`` have no flavor (``"undefined"``).

    Raises
    ------
    AlignmentError
        ``|v1 - s v2| > align_tol * |v1|``.
    """
    if k == 0:
        return "undefined"
    v1 = H.vector_field(_as_z(x1))[: H.n]
    v2 = H.vector_field(_as_z(x2))[: H.n]
    s = float(v1 @ v2 / (v2 @ v2))
    if np.linalg.norm(v1 - s * v2) > align_tol * np.linalg.norm(v1):
        raise AlignmentError(f"base velocities not parallel (residual "
                             f"{np.linalg.norm(v1 - s * v2):.3e})")
    return "iso" if s > 0 else "anti"


def residual_jacobian(H: HamiltonianModel, x1, x2, k: int, axis: int | None = None,
                      h: float = RANK_STEP) -> np.ndarray:
    """Central-difference Jacobian of the residual in on-level chart coordinates."""
    z1, z2 = _as_z(x1), _as_z(x2)
    if axis is None:
        axis = choose_axis(H.vector_field(z1)[: H.n])
    fr = _frame(H, np.stack([z1, z2])[None])
    return _jacobian(H, fr, k, np.array([axis]), h, central=True)[0]


def richardson_check(H: HamiltonianModel, x1, x2, k: int, axis: int | None = None,
                     h: float = 1e-3) -> float:
    """Relative gap between the step-``h`` Jacobian and its Richardson extrapolant."""
    J1 = residual_jacobian(H, x1, x2, k, axis, h)
    J2 = residual_jacobian(H, x1, x2, k, axis, h / 2)
    JR = (4 * J2 - J1) / 3
    return float(np.linalg.norm(J1 - JR) / np.linalg.norm(JR))


def rank_from_singular_values(s: np.ndarray, rank_tol: float = RANK_TOL,
                              band: float = AMBIGUITY_FACTOR) -> tuple[int, bool]:
    if s.size == 0 or s[0] == 0:
        return 0, False
    thr = rank_tol * s[0]
    rank = int(np.sum(s > thr))
    ambiguous = bool(np.any((s > thr / band) & (s < thr * band)))
    return rank, ambiguous


def estimate_local_dimension(H: HamiltonianModel, x1, x2, k: int, axis: int | None = None,
                             rank_tol: float = RANK_TOL, band: float = AMBIGUITY_FACTOR,
                             h: float = RANK_STEP):
    """``2(2n-1) - rank`` of the residual Jacobian, or ``AMBIGUOUS``.

    Returns ``(dimension, singular_values)``.
    """
    J = residual_jacobian(H, x1, x2, k, axis, h)
    s = np.linalg.svd(J, compute_uv=False)
    rank, amb = rank_from_singular_values(s, rank_tol, band)
    dim = AMBIGUOUS if amb else 2 * (2 * H.n - 1) - rank
    return dim, s


# ---------------------------------------------------------------- solver

@dataclass
class BatchResult:
    z1: np.ndarray
    z2: np.ndarray
    axes: np.ndarray
    norm: np.ndarray
    status: np.ndarray       # "converged" | "diagonal" | "stalled" | "max_iter" | "invalid"
    iterations: np.ndarray
    history: list


def solve_batch(H: HamiltonianModel, Z1, Z2, k: int, axes=None, solve_tol: float = SOLVE_TOL,
                diag_margin: float = DIAG_MARGIN, max_iter: int = MAX_ITER,
                fd_step: float = FD_STEP, axis_margin: float = AXIS_MARGIN,
                keep_history: bool = False, box=None, box_slack: float = 0.1) -> BatchResult:
    """Damped Gauss-Newton (Levenberg-Marquardt) on a batch of seed pairs.

    With a base ``box`` given, iterates whose base points leave the box
    enlarged by ``box_slack`` times its size are stopped (status ``left_box``).
    """
    Z = np.stack([np.atleast_2d(Z1), np.atleast_2d(Z2)], axis=1).astype(float)
    B = Z.shape[0]
    n = H.n
    if axes is None:
        axes = choose_axis(H.vector_field(Z[:, 0])[:, :n])
    axes = np.broadcast_to(np.asarray(axes, int), (B,)).copy()
    status = np.full(B, "running", dtype=object)
    iters = np.zeros(B, int)
    F = pair_residuals(H, Z[:, 0], Z[:, 1], k, axes, axis_margin)
    norm = np.linalg.norm(F, axis=1)
    status[~np.isfinite(norm)] = "invalid"
    mu = np.full(B, 1e-3)
    best_hist = np.full((B, 6), np.inf)
    history = [norm.copy()] if keep_history else []
    d = 2 * (2 * n - 1)
    for it in range(max_iter):
        act = np.nonzero(status == "running")[0]
        done = norm[act] <= solve_tol
        status[act[done]] = "converged"
        act = act[~done]
        if act.size == 0:
            break
        fr = _frame(H, Z[act])
        J = _jacobian(H, fr, k, axes[act], fd_step, central=False, F0=F[act], axis_margin=axis_margin)
        badJ = ~np.all(np.isfinite(J), axis=(1, 2))
        J[badJ] = 0.0
        JtJ = np.einsum("bmi,bmj->bij", J, J)
        g = np.einsum("bmi,bm->bi", J, F[act])
        scale = np.maximum(np.einsum("bii->b", JtJ) / d, 1e-300)
        trial_ok = np.zeros(act.size, bool)
        Znew = Z[act].copy()
        Fnew = F[act].copy()
        nnew = norm[act].copy()
        # up to three damping adjustments per iteration
        pending = np.arange(act.size)
        for _ in range(3):
            if pending.size == 0:
                break
            A = JtJ[pending] + (mu[act[pending]] * scale[pending])[:, None, None] * np.eye(d)
            step = -np.linalg.solve(A, g[pending][..., None])[..., 0]
            Zt = _move(H, _Frame(fr.z[pending], fr.basis[pending], fr.normal[pending]), step)
            Ft = pair_residuals(H, Zt[:, 0], Zt[:, 1], k, axes[act[pending]], axis_margin)
            nt = np.linalg.norm(Ft, axis=1)
            good = np.isfinite(nt) & (nt < norm[act[pending]])
            sel = pending[good]
            Znew[sel], Fnew[sel], nnew[sel] = Zt[good], Ft[good], nt[good]
            trial_ok[sel] = True
            mu[act[sel]] = np.maximum(mu[act[sel]] / 3.0, 1e-12)
            mu[act[pending[~good]]] *= 8.0
            pending = pending[~good]
        Z[act], F[act], norm[act] = Znew, Fnew, nnew
        iters[act] += 1
        # diagonal collapse
        gap = np.linalg.norm(Z[act, 0] - Z[act, 1], axis=1)
        status[act[gap < diag_margin]] = "diagonal"
        if box is not None:
            lo = np.array([b[0] for b in box], float)
            hi = np.array([b[1] for b in box], float)
            pad = box_slack * (hi - lo)
            q = Z[act][:, :, :n]
            out = np.any((q < lo - pad) | (q > hi + pad), axis=(1, 2))
            status[act[out & (status[act] == "running")]] = "left_box"
        # stagnation: no acceptable step, or < 10% gain over six iterations
        best_hist[act] = np.roll(best_hist[act], -1, axis=1)
        best_hist[act, -1] = norm[act]
        slow = (best_hist[act, -1] > 0.9 * best_hist[act, 0]) & np.isfinite(best_hist[act, 0])
        stuck = (~trial_ok) & (mu[act] > 1e8)
        still = status[act] == "running"
        status[act[still & (slow | stuck) & (norm[act] > solve_tol)]] = "stalled"
        if keep_history:
            history.append(norm.copy())
    run = status == "running"
    status[run & (norm <= solve_tol)] = "converged"
    status[run & (norm > solve_tol)] = "max_iter"
    return BatchResult(Z[:, 0], Z[:, 1], axes, norm, status, iters, history)


def _finalize(H, z1, z2, k, axis, norm, rank_tol, band, estimate_dim=True) -> HomopodalPair:
    x1 = certify_level_point(H, z1)
    x2 = certify_level_point(H, z2)
    try:
        flavor = classify_flavor(H, x1, x2, k)
    except AlignmentError:
        flavor = "unaligned"
    if estimate_dim:
        dim, s = estimate_local_dimension(H, x1, x2, k, axis, rank_tol, band)
    else:
        dim, s = None, None
    return HomopodalPair(x1, x2, k, flavor, float(norm), dim, int(axis), s)


def solve_homopodal(H: HamiltonianModel, seed, k: int, axis: int | None = None,
                    solve_tol: float = SOLVE_TOL, diag_margin: float = DIAG_MARGIN,
                    max_iter: int = MAX_ITER, rank_tol: float = RANK_TOL,
                    band: float = AMBIGUITY_FACTOR) -> HomopodalPair:
    """Refine a seed pair ``(x1, x2)`` to a homopodal pair of order ``k``.

    Raises
    ------
    NoConvergence
        The residual stalled, the iteration limit was hit, or the iterates
        collapsed onto the diagonal; ``history`` records the residual norms.
    """
    z1 = project_to_level(H, _as_z(seed[0]))
    z2 = project_to_level(H, _as_z(seed[1]))
    if np.linalg.norm(z1 - z2) < diag_margin:
        raise DiagonalError("seed lies within diag_margin of the diagonal")
    res = solve_batch(H, z1[None], z2[None], k, None if axis is None else [axis], solve_tol,
                      diag_margin, max_iter, keep_history=True)
    hist = [float(h[0]) for h in res.history]
    if res.status[0] != "converged":
        raise NoConvergence(f"no convergence ({res.status[0]}), last residual {res.norm[0]:.3e}", hist)
    return _finalize(H, res.z1[0], res.z2[0], k, res.axes[0], res.norm[0], rank_tol, band)


# ------------------------------------------------------------ inflections

def fiber_hessian_restricted(H: HamiltonianModel, x):
    """Fiber Hessian on ``ker d_v H`` and the full fiber Hessian."""
    z = _as_z(x)
    n = H.n
    Hz = H.hessian(z)
    Hp = Hz[n:, n:]
    gp = H.gradient(z)[n:]
    _, _, vt = np.linalg.svd(gp[None, :])
    K = vt[1:].T
    return K.T @ Hp @ K, Hp


def inflection_order(H: HamiltonianModel, x, rank_tol: float = RANK_TOL) -> int:
    """``dim(ker d_v^2 H  on  ker d_v H)`` at a level point.

    Singular values of the restricted Hessian are compared with
    ``rank_tol`` times the largest singular value of the full fiber Hessian.
    """
    R, Hp = fiber_hessian_restricted(H, x)
    smax = np.linalg.norm(Hp, 2)
    s = np.linalg.svd(R, compute_uv=False)
    if smax == 0:
        return R.shape[0]
    return int(np.sum(s <= rank_tol * smax))


# ------------------------------------------------------------------ scans

def sphere_points(u: np.ndarray) -> np.ndarray:
    """Map unit-cube samples ``(N, n-1)`` to the sphere ``S^(n-1)`` (area-uniform)."""
    N, m = u.shape
    n = m + 1
    if n == 2:
        a = 2 * np.pi * u[:, 0]
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if n == 3:
        zc = 2 * u[:, 0] - 1
        a = 2 * np.pi * u[:, 1]
        r = np.sqrt(np.clip(1 - zc * zc, 0, None))
        return np.stack([r * np.cos(a), r * np.sin(a), zc], axis=1)
    from scipy.special import ndtri
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    g = np.concatenate([g, np.ones((N, 1))], axis=1)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def fiber_points(H: HamiltonianModel, q: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Level points over ``q`` found along covector rays ``directions`` from 0."""
    n = H.n
    z = np.concatenate([q, directions], axis=1)
    d = np.concatenate([np.zeros_like(q), directions], axis=1)
    return project_to_level(H, z, direction=d, iters=30)


def make_seeds(H: HamiltonianModel, strategy: str, count: int, box, seed: int,
               jitter: float = 0.05):
    """Quasi-random seed pairs over the base box ``[(lo, hi)] * n``.

    Strategies
    ----------
    uniform : independent base points and directions
    fiber : common base point, independent directions
    antipodal : common base point, nearly opposite directions, jittered
    """
    n = H.n
    lo = np.array([b[0] for b in box], float)
    hi = np.array([b[1] for b in box], float)
    dims = {"uniform": 2 * n + 2 * (n - 1), "fiber": n + 2 * (n - 1),
            "antipodal": n + (n - 1) + n + n}[strategy]
    sob = qmc.Sobol(dims, scramble=True, seed=seed)
    m = max(1, int(math.ceil(math.log2(max(count, 1)))))
    u = sob.random_base2(m)[:count]
    if strategy == "uniform":
        q1 = lo + (hi - lo) * u[:, :n]
        q2 = lo + (hi - lo) * u[:, n:2 * n]
        d1 = sphere_points(u[:, 2 * n:2 * n + n - 1])
        d2 = sphere_points(u[:, 2 * n + n - 1:])
    elif strategy == "fiber":
        q1 = q2 = lo + (hi - lo) * u[:, :n]
        d1 = sphere_points(u[:, n:2 * n - 1])
        d2 = sphere_points(u[:, 2 * n - 1:])
    elif strategy == "antipodal":
        q1 = lo + (hi - lo) * u[:, :n]
        d1 = sphere_points(u[:, n:2 * n - 1])
        d2 = -d1 + jitter * (2 * u[:, 2 * n - 1:3 * n - 1] - 1)
        d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
        q2 = q1 + jitter * (hi - lo) * (2 * u[:, 3 * n - 1:4 * n - 1] - 1) * 0.1
    else:
        raise ValueError(f"unknown seed strategy {strategy!r}")
    Z1 = fiber_points(H, np.asarray(q1, float), d1)
    Z2 = fiber_points(H, np.asarray(q2, float), d2)
    return Z1, Z2


def _canonical(z1, z2, n):
    """Order each pair so that ``p1 < p2`` lexicographically (swap symmetry)."""
    diff = z1[:, n:] - z2[:, n:]
    mask = np.abs(diff) > 1e-9
    first = np.argmax(mask, axis=1)
    swap = mask.any(axis=1) & (diff[np.arange(diff.shape[0]), first] > 0)
    a = np.where(swap[:, None], z2, z1)
    b = np.where(swap[:, None], z1, z2)
    return a, b


def deduplicate(z1: np.ndarray, z2: np.ndarray, eps: float = DEDUP_EPS):
    """Indices of representatives after clustering pairs within ``eps``."""
    if z1.shape[0] == 0:
        return np.zeros(0, int)
    X = np.concatenate([z1, z2], axis=1)
    order = np.lexsort(X.T[::-1])
    X = X[order]
    tree = cKDTree(X)
    taken = np.zeros(X.shape[0], bool)
    keep = []
    for i in range(X.shape[0]):
        if taken[i]:
            continue
        keep.append(order[i])
        for j in tree.query_ball_point(X[i], eps):
            taken[j] = True
    return np.array(sorted(keep, key=lambda j: tuple(np.concatenate([z1[j], z2[j]]))), int)


@dataclass
class ScanReport:
    pairs: list
    config: dict
    seeds: int
    prefiltered: int
    attempted: int
    status_counts: dict
    outside_box: int
    runtime: float
    certificate: str
    closest_residual: float = math.inf

    @property
    def not_converged_count(self) -> int:
        return sum(v for k, v in self.status_counts.items() if k != "converged")

    def dims(self):
        return [p.est_dim for p in self.pairs]

    def flavors(self):
        return [p.flavor for p in self.pairs]

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = {
            "config": self.config,
            "pairs": [p.to_record() for p in self.pairs],
            "found": len(self.pairs),
            "seeds": self.seeds,
            "prefiltered": self.prefiltered,
            "attempted": self.attempted,
            "status_counts": dict(sorted(self.status_counts.items())),
            "not_converged_count": self.not_converged_count,
            "outside_box": self.outside_box,
            "certificate": self.certificate,
            "closest_unconverged_residual": (None if not math.isfinite(self.closest_residual)
                                             else float(self.closest_residual)),
        }
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        if not self.pairs:
            return "k,flavor,dim,residual\n"
        n = self.pairs[0].x1.point.n
        cols = ([f"x1_q{i + 1}" for i in range(n)] + [f"x1_p{i + 1}" for i in range(n)]
                + [f"x2_q{i + 1}" for i in range(n)] + [f"x2_p{i + 1}" for i in range(n)]
                + ["k", "flavor", "dim", "residual"])
        lines = [",".join(cols)]
        for p in self.pairs:
            vals = [repr(float(v)) for v in np.concatenate([p.x1.z, p.x2.z])]
            lines.append(",".join(vals + [str(p.k), p.flavor, str(p.est_dim), repr(p.residual_norm)]))
        return "\n".join(lines) + "\n"


def scan_homopodal(H: HamiltonianModel, k: int, strategy: str = "antipodal", budget: int = 1000,
                   box=None, seed: int = 0, solve_tol: float = SOLVE_TOL,
                   diag_margin: float = DIAG_MARGIN, dedup_eps: float = DEDUP_EPS,
                   rank_tol: float = RANK_TOL, band: float = AMBIGUITY_FACTOR,
                   capture_residual: float = 1.0, max_iter: int = MAX_ITER,
                   chunk: int = 2048, threads: int = 1, estimate_dims: bool = True,
                   max_pairs: int | None = None, jitter: float = 0.05) -> ScanReport:
    """Search for off-diagonal order-k homopodal pairs from quasi-random seeds.

    Seeds whose initial residual exceeds ``capture_residual`` are outside the
    solver's capture region and are counted as prefiltered.  Converged
    pairs leaving the base ``box`` are discarded.  The result lists
    deduplicated pairs in lexicographic order; an empty list is a search
    certificate for this budget, not a proof of emptiness.
    """
    t_start = time.perf_counter()
    n = H.n
    if box is None:
        box = [(-1.0, 1.0)] * n
    Z1, Z2 = make_seeds(H, strategy, budget, box, seed, jitter)
    ok = np.all(np.isfinite(Z1), axis=1) & np.all(np.isfinite(Z2), axis=1)
    ok &= np.linalg.norm(Z1 - Z2, axis=1) >= diag_margin
    axes = np.zeros(budget, int)
    v1 = H.vector_field(np.where(ok[:, None], Z1, 0.0))[:, :n]
    axes[ok] = choose_axis(v1[ok])
    F0 = np.full((budget, residual_dimension(n, k)), np.nan)
    idx = np.nonzero(ok)[0]
    for s in range(0, idx.size, chunk):
        sl = idx[s:s + chunk]
        F0[sl] = pair_residuals(H, Z1[sl], Z2[sl], k, axes[sl])
    n0 = np.linalg.norm(F0, axis=1)
    ok &= np.isfinite(n0) & (n0 <= capture_residual)
    idx = np.nonzero(ok)[0]
    chunks = [idx[s:s + chunk] for s in range(0, idx.size, chunk)]

    def work(sl):
        return solve_batch(H, Z1[sl], Z2[sl], k, axes[sl], solve_tol, diag_margin, max_iter, box=box)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
        # ordered merge: pool.map preserves submission order
    else:
        results = [work(c) for c in chunks]
    counts: dict[str, int] = {}
    zs1, zs2, ax, nm = [], [], [], []
    closest = math.inf
    for r in results:
        for st in r.status:
            counts[st] = counts.get(st, 0) + 1
        stuck = np.isin(r.status, ["stalled", "max_iter"])
        if np.any(stuck):
            closest = min(closest, float(np.min(r.norm[stuck])))
        c = r.status == "converged"
        zs1.append(r.z1[c]); zs2.append(r.z2[c]); ax.append(r.axes[c]); nm.append(r.norm[c])
    cz1 = np.concatenate(zs1) if zs1 else np.zeros((0, 2 * n))
    cz2 = np.concatenate(zs2) if zs2 else np.zeros((0, 2 * n))
    cax = np.concatenate(ax) if ax else np.zeros(0, int)
    cnm = np.concatenate(nm) if nm else np.zeros(0)
    lo = np.array([b[0] for b in box]) - 1e-12
    hi = np.array([b[1] for b in box]) + 1e-12
    inside = np.all((cz1[:, :n] >= lo) & (cz1[:, :n] <= hi) & (cz2[:, :n] >= lo) & (cz2[:, :n] <= hi), axis=1)
    outside = int(np.sum(~inside))
    cz1, cz2, cax, cnm = cz1[inside], cz2[inside], cax[inside], cnm[inside]
    a, b = _canonical(cz1, cz2, n)
    keep = deduplicate(a, b, dedup_eps)
    if max_pairs is not None:
        keep = keep[:max_pairs]
    pairs = []
    for j in keep:
        # keep the solver's orientation for the jet axis, canonical order for reporting
        pair = _finalize(H, cz1[j], cz2[j], k, cax[j], cnm[j], rank_tol, band, estimate_dims)
        if not np.allclose(a[j], cz1[j]):
            pair = pair.swapped()
        pairs.append(pair)
    if pairs:
        cert = f"{len(pairs)} off-diagonal pairs found"
    else:
        cert = "no off-diagonal solutions found within budget"
    config = {
        "k": k, "n": n, "strategy": strategy, "budget": budget, "box": [list(map(float, b)) for b in box],
        "seed": seed, "solve_tol": solve_tol, "diag_margin": diag_margin, "dedup_eps": dedup_eps,
        "rank_tol": rank_tol, "ambiguity_factor": band, "capture_residual": capture_residual,
        "max_iter": max_iter, "fd_step": FD_STEP, "rank_step": RANK_STEP, "jitter": jitter,
        "axis_margin": AXIS_MARGIN, "hamiltonian": str(H),
    }
    return ScanReport(pairs, config, budget, int(budget - idx.size), int(idx.size), counts, outside,
                      time.perf_counter() - t_start, cert, closest)
