"""Fiber scans of order-1 homopodes for fiberwise Hamiltonians on T*R^2.

Over a fixed base point the fiber is a closed curve parametrized by the
polar angle ``phi`` of ``p``.  Two fiber points are order-1 homopodal iff
their conormals ``N = grad_p H`` are parallel, so the homopodal set in the
fiber torus is the zero set of ``cross(N(phi1), N(phi2))`` off the
diagonal.  Dividing by ``sin((phi2 - phi1)/2)`` removes the diagonal zero
and leaves a function whose zero set reaches the diagonal exactly at
inflection points.
"""
from __future__ import annotations

import csv
import io
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .hamsys import HamiltonianModel
from .homopode import (DIAG_MARGIN, RANK_TOL, classify_flavor, fiber_hessian_restricted,
                       fiber_points, inflection_order, pair_residuals)
from .subjets import choose_axis

TWO_PI = 2 * math.pi
VERIFY_TOL = 1e-8
LINK_FACTOR = 3.0


def fiber_curve(H: HamiltonianModel, q, phi) -> np.ndarray:
    """Level points over ``q`` on the rays of polar angles ``phi``, shape ``(N, 4)``."""
    phi = np.atleast_1d(np.asarray(phi, float))
    qq = np.broadcast_to(np.asarray(q, float), (phi.size, 2))
    d = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return fiber_points(H, np.array(qq), d)


def conormals(H: HamiltonianModel, Z: np.ndarray) -> np.ndarray:
    g = H.gradient(Z)[..., 2:]
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class _Fiber:
    """Cached evaluation of the fiber and its Gauss map."""

    def __init__(self, H, q, fd_step=1e-6):
        self.H, self.q, self.h = H, np.asarray(q, float), fd_step

    def normal(self, phi):
        return conormals(self.H, fiber_curve(self.H, self.q, phi))

    def turning_rate(self, phi):
        """``d psi / d phi`` of the conormal angle (central difference)."""
        a = self.normal(np.asarray(phi) - self.h)
        b = self.normal(np.asarray(phi) + self.h)
        return np.arctan2(_cross(a, b), np.sum(a * b, axis=-1)) / (2 * self.h)

    def g(self, phi1, phi2, n1=None):
        """``cross(N1, N2) / sin((phi2 - phi1)/2)`` for ``phi2 - phi1`` in ``(0, 2 pi)``."""
        n1 = self.normal(phi1) if n1 is None else n1
        n2 = self.normal(phi2)
        return _cross(n1, n2) / np.sin((phi2 - phi1) / 2)


def _bisect(f, a, b, fa, iters=60):
    """Vectorized bisection for sign changes of ``f`` on ``[a, b]``."""
    a, b, fa = a.copy(), b.copy(), fa.copy()
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = f(m)
        left = np.sign(fm) == np.sign(fa)
        a = np.where(left, m, a)
        fa = np.where(left, fm, fa)
        b = np.where(left, b, m)
    return 0.5 * (a + b)


def inflection_angles(H: HamiltonianModel, q, grid: int = 720, iters: int = 60) -> np.ndarray:
    """Angles where the restricted fiber Hessian changes sign (sorted)."""
    fib = _Fiber(H, q)
    phi = TWO_PI * np.arange(grid) / grid

    def kappa(ph):
        Z = fiber_curve(H, q, ph)
        return np.array([fiber_hessian_restricted(H, z)[0][0, 0] for z in Z])

    k = kappa(phi)
    nxt = np.roll(k, -1)
    idx = np.nonzero(np.sign(k) != np.sign(nxt))[0]
    if idx.size == 0:
        return np.zeros(0)
    a = phi[idx]
    b = a + TWO_PI / grid
    roots = _bisect(kappa, a, b, k[idx], iters)
    del fib
    return np.sort(np.mod(roots, TWO_PI))


def parallel_angles(H: HamiltonianModel, q, phi0: float, grid: int = 720) -> list[tuple[float, str]]:
    """Other fiber angles whose conormal is parallel to the one at ``phi0``."""
    fib = _Fiber(H, q)
    n0 = fib.normal(np.array([phi0]))[0]
    off = TWO_PI * (np.arange(1, grid) / grid)
    vals = fib.g(np.full(off.size, phi0), phi0 + off, np.broadcast_to(n0, (off.size, 2)))
    out = []
    idx = np.nonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0]
    if idx.size:
        f = lambda x: fib.g(np.full(x.size, phi0), x, np.broadcast_to(n0, (x.size, 2)))
        roots = _bisect(f, phi0 + off[idx], phi0 + off[idx + 1], vals[idx])
        for r in roots:
            s = float(np.dot(n0, fib.normal(np.array([r]))[0]))
            out.append((float(np.mod(r, TWO_PI)), "iso" if s > 0 else "anti"))
    return out


@dataclass
class HeartScan:
    """Labeled point cloud of order-1 homopodes in the fiber torus."""

    phi1: np.ndarray
    phi2: np.ndarray
    flavor: np.ndarray          # "iso" / "anti"
    residual: np.ndarray
    component: np.ndarray
    closure: np.ndarray         # True for diagonal closure points (inflections)
    components: list[dict]
    inflections: list[dict]
    parallels: list[dict]
    config: dict
    runtime: float = 0.0
    checks: dict = field(default_factory=dict)

    @property
    def component_count(self) -> int:
        return len(self.components)

    def to_dict(self, include_runtime: bool = True) -> dict:
        out = {"config": self.config, "component_count": self.component_count,
               "components": self.components, "inflections": self.inflections,
               "parallels": self.parallels, "points": int(self.phi1.size), "checks": self.checks}
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phi1", "phi2", "flavor", "component", "residual", "closure"])
        for row in zip(self.phi1, self.phi2, self.flavor, self.component, self.residual, self.closure):
            w.writerow([repr(float(row[0])), repr(float(row[1])), row[2], int(row[3]),
                        repr(float(row[4])), int(bool(row[5]))])
        return buf.getvalue()


def _torus_diff(a, b):
    return np.mod(b - a + math.pi, TWO_PI) - math.pi


def _components(points: np.ndarray, link: float):
    """Single-linkage components on the flat torus and their homology classes."""
    P = np.mod(points, TWO_PI)
    tree = cKDTree(P, boxsize=TWO_PI)
    pairs = tree.query_pairs(link, output_type="ndarray")
    nbrs = [[] for _ in range(P.shape[0])]
    for i, j in pairs:
        nbrs[i].append(j)
        nbrs[j].append(i)
    label = -np.ones(P.shape[0], int)
    lift = np.zeros_like(P)
    classes = []
    for start in range(P.shape[0]):
        if label[start] >= 0:
            continue
        c = len(classes)
        label[start] = c
        lift[start] = P[start]
        queue = deque([start])
        periods = set()
        while queue:
            i = queue.popleft()
            for j in nbrs[i]:
                step = _torus_diff(P[i], P[j])
                if label[j] < 0:
                    label[j] = c
                    lift[j] = lift[i] + step
                    queue.append(j)
                else:
                    m = np.rint((lift[j] - lift[i] - step) / TWO_PI).astype(int)
                    if np.any(m != 0):
                        if m[0] < 0 or (m[0] == 0 and m[1] < 0):
                            m = -m
                        periods.add((int(m[0]), int(m[1])))
        classes.append(sorted(periods))
    return label, classes


def heart_fiber_scan(H: HamiltonianModel, q=(0.0, 0.0), k: int = 1, grid: int = 256,
                     diag_margin: float = DIAG_MARGIN, verify_tol: float = VERIFY_TOL,
                     link_factor: float = LINK_FACTOR, rank_tol: float = RANK_TOL) -> HeartScan:
    """Order-1 homopodal set of one fiber, labeled by flavor and component.

    Each grid row ``phi1`` is scanned for sign changes of the desingularized
    conormal cross product in ``phi2`` and roots are refined by bisection.
    Every point is verified with the homopodal residual (``<= verify_tol``).
    The set is symmetric under swapping, so column roots are the swapped
    row roots.  Components are single-linkage clusters at radius
    ``link_factor * 2 pi / grid`` on the torus; inflection points on the
    diagonal are added as closure points, so components are those of the
    closure of the set.
    """
    if H.n != 2:
        raise ValueError("fiber scans need a Hamiltonian on T*R^2")
    if k != 1:
        raise ValueError("fiber scans compare conormal directions, i.e. order k = 1")
    t0 = time.perf_counter()
    q = np.asarray(q, float)
    fib = _Fiber(H, q)
    h = TWO_PI / grid
    phi = h * np.arange(grid)
    normals = fib.normal(phi)
    rate = fib.turning_rate(phi)
    roots1, roots2 = [], []
    for i in range(grid):
        off = h * np.arange(1, grid)
        x = np.concatenate([[phi[i]], phi[i] + off, [phi[i] + TWO_PI]])
        n1 = np.broadcast_to(normals[i], (grid - 1, 2))
        inner = fib.g(np.full(grid - 1, phi[i]), phi[i] + off, n1)
        # limits at the two ends of the open interval (the diagonal)
        vals = np.concatenate([[2 * rate[i]], inner, [-2 * rate[i]]])
        idx = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
        if idx.size == 0:
            continue
        f = lambda xs, i=i: fib.g(np.full(xs.size, phi[i]), xs, np.broadcast_to(normals[i], (xs.size, 2)))
        r = _bisect(f, x[idx], x[idx + 1], vals[idx])
        roots1.append(np.full(r.size, phi[i]))
        roots2.append(np.mod(r, TWO_PI))
    p1 = np.concatenate(roots1) if roots1 else np.zeros(0)
    p2 = np.concatenate(roots2) if roots2 else np.zeros(0)
    # swap symmetry supplies the column scan
    a = np.concatenate([p1, p2])
    b = np.concatenate([p2, p1])
    Z1 = fiber_curve(H, q, a)
    Z2 = fiber_curve(H, q, b)
    off_diag = np.linalg.norm(Z1 - Z2, axis=1) >= diag_margin
    a, b, Z1, Z2 = a[off_diag], b[off_diag], Z1[off_diag], Z2[off_diag]
    axes = choose_axis(H.vector_field(Z1)[:, :2])
    F = pair_residuals(H, Z1, Z2, 1, axes)
    res = np.linalg.norm(F, axis=1)
    ok = np.isfinite(res) & (res <= verify_tol)
    a, b, Z1, Z2, res = a[ok], b[ok], Z1[ok], Z2[ok], res[ok]
    N1, N2 = conormals(H, Z1), conormals(H, Z2)
    flavor = np.where(np.sum(N1 * N2, axis=1) > 0, "iso", "anti")
    rejected = int(np.sum(~ok))

    infl = inflection_angles(H, q)
    orders = []
    for ph in infl:
        z = fiber_curve(H, q, [ph])[0]
        orders.append(inflection_order(H, z, rank_tol))
    grid_orders = [inflection_order(H, z, rank_tol) for z in fiber_curve(H, q, phi)]
    closure = np.zeros(a.size, bool)
    if infl.size:
        a = np.concatenate([a, infl])
        b = np.concatenate([b, infl])
        flavor = np.concatenate([flavor, np.full(infl.size, "iso")])
        res = np.concatenate([res, np.zeros(infl.size)])
        closure = np.concatenate([closure, np.ones(infl.size, bool)])
    label, classes = _components(np.stack([a, b], axis=1), link_factor * h)
    comps = []
    for c, periods in enumerate(classes):
        sel = label == c
        flv = sorted(set(flavor[sel & ~closure].tolist()))
        comps.append({
            "id": c, "size": int(np.sum(sel & ~closure)), "flavor": flv[0] if len(flv) == 1 else "mixed",
            "winding": list(periods[0]) if periods else [0, 0],
            "periods": [list(p) for p in periods],
            "contractible": not periods,
        })
    # spot check of the flavor classifier on a few points per component
    spot = {}
    for c in range(len(classes)):
        idx = np.nonzero((label == c) & ~closure)[0][:3]
        spot[c] = [classify_flavor(H, Z1[j], Z2[j]) for j in idx if j < Z1.shape[0]]
    parallels = []
    for j, ph in enumerate(infl):
        for ang, flv in parallel_angles(H, q, float(ph)):
            parallels.append({"inflection": j, "phi": ang, "flavor": flv})
    config = {"q": q.tolist(), "k": k, "grid": grid, "diag_margin": diag_margin,
              "verify_tol": verify_tol, "link_radius": link_factor * h, "rank_tol": rank_tol,
              "hamiltonian": str(H)}
    checks = {"rejected_roots": rejected, "max_residual": float(np.max(res)) if res.size else 0.0,
              "grid_inflection_orders_max": int(max(grid_orders)),
              "classifier_spot_check": {str(c): v for c, v in spot.items()}}
    return HeartScan(a, b, flavor, res, label, closure, comps,
                     [{"phi": float(p), "order": int(o)} for p, o in zip(infl, orders)],
                     parallels, config, time.perf_counter() - t0, checks)
