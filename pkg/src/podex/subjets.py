"""Jets of base-projected orbits in divided (graph) coordinates.

A regular curve in R^n near a point where its velocity has a nonzero
``axis`` component is locally a graph ``y(x)`` over ``x = q_axis``.  Its
k-jet is the list of derivatives ``y^(0..k)`` at the marked point, which
does not depend on how the curve is parametrized.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .hamsys import HamiltonianModel, LevelPoint, _as_z
from .series import compose, revert

AXIS_MARGIN = 0.2
K_MAX = 6
JET_TOL = 1e-8
TOP = math.inf  # tangent to every order examined


class AxisMarginError(ValueError):
    """Velocity component along the graph axis is too small for divided coordinates."""


class ChartMismatchError(ValueError):
    """Two jets cannot be compared on a common graph axis."""


def taylor_coefficients(field: Callable, z0, order: int) -> np.ndarray:
    """Taylor coefficients of the solution of ``z' = field(z)`` through ``z0``.

    Uses the recurrence ``z_{j+1} = F_j/(j+1)``, where ``F_j`` is the j-th
    series coefficient of the field evaluated on the series truncated after
    ``z_j``.  ``field`` maps a list of coordinate series ``(L, *batch)`` to a
    list of series of the same shape.

    Returns an array of shape ``(order+1, *batch, m)``.
    """
    z0 = np.asarray(z0, dtype=float)
    m = z0.shape[-1]
    coeffs = np.zeros((order + 1,) + z0.shape)
    coeffs[0] = z0
    for j in range(order):
        state = [np.ascontiguousarray(coeffs[: j + 1, ..., i]) for i in range(m)]
        F = field(state)
        for i in range(m):
            coeffs[j + 1, ..., i] = F[i][j] / (j + 1)
    return coeffs


def orbit_taylor(H: HamiltonianModel, x0, order: int) -> np.ndarray:
    """Taylor coefficients of ``t -> (q(t), p(t))`` to ``order`` along ``X_H``.

    ``x0`` may be a :class:`LevelPoint` or an array ``(..., 2n)``; the result
    has shape ``(order+1, ..., 2n)``.
    """
    return taylor_coefficients(H.field_series, _as_z(x0), order)


@dataclass(frozen=True)
class CurveJet:
    """k-jet of a curve in R^d as a graph over coordinate ``axis`` (0-based).

    ``coeffs[j-1]`` holds the j-th derivative ``y^(j)`` of the graph map at
    the marked point; ``base_value`` is ``y^(0)``.
    """

    axis: int
    base: float
    base_value: np.ndarray
    coeffs: np.ndarray
    k: int
    orientation: int

    @property
    def dim(self) -> int:
        """Dimension of the ambient space of the curve."""
        return self.base_value.size + 1

    @property
    def all_coeffs(self) -> np.ndarray:
        """``y^(0..k)`` stacked, shape ``(k+1, dim-1)``."""
        return np.vstack([self.base_value[None, :], self.coeffs.reshape(self.k, -1)])

    @property
    def coordinate_count(self) -> int:
        return 1 + (self.dim - 1) * (self.k + 1)

    def coordinates(self) -> np.ndarray:
        return np.concatenate([[self.base], self.all_coeffs.ravel()])

    def truncate(self, k: int) -> "CurveJet":
        return CurveJet(self.axis, self.base, self.base_value, self.coeffs[:k], k, self.orientation)

    def point(self) -> np.ndarray:
        """The marked point in ambient coordinates."""
        return np.insert(self.base_value, self.axis, self.base)

    def evaluate(self, x) -> np.ndarray:
        """Taylor polynomial of the graph map at ``x`` (shape ``(..., dim-1)``)."""
        tau = np.asarray(x, dtype=float)[..., None] - self.base
        allc = self.all_coeffs
        out = np.broadcast_to(allc[self.k] / math.factorial(self.k), tau.shape[:-1] + (self.dim - 1,))
        for j in range(self.k - 1, -1, -1):
            out = out * tau + allc[j] / math.factorial(j)
        return out

    def to_record(self) -> dict:
        return {
            "axis": self.axis + 1,
            "base": float(self.base),
            "k": self.k,
            "orientation": self.orientation,
            "coeffs": self.all_coeffs.T.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "CurveJet":
        c = np.asarray(rec["coeffs"], dtype=float).T
        return cls(int(rec["axis"]) - 1, float(rec["base"]), c[0].copy(), c[1:].copy(),
                   int(rec["k"]), int(rec.get("orientation", 1)))

    @classmethod
    def from_graph(cls, axis: int, base: float, derivatives, orientation: int = 1) -> "CurveJet":
        """Build from ``y^(0..k)`` given as an array ``(k+1, d-1)``."""
        d = np.atleast_2d(np.asarray(derivatives, dtype=float))
        return cls(axis, float(base), d[0].copy(), d[1:].copy(), d.shape[0] - 1, orientation)


def choose_axis(velocity) -> int:
    """Index of the largest ``|velocity|`` component (lowest index on ties)."""
    v = np.abs(np.asarray(velocity, dtype=float))
    return int(np.argmax(v, axis=-1)) if v.ndim == 1 else np.argmax(v, axis=-1)


def graph_derivatives(series: np.ndarray, axis, k: int):
    """Divided-coordinate derivatives from curve Taylor coefficients.

    Parameters
    ----------
    series : array ``(L, *batch, d)``
        Taylor coefficients in time of a curve in R^d, ``L >= k+1``.
    axis : int
        Graph axis, shared by the whole batch.
    k : int
        Jet order.

    Returns
    -------
    base : array ``batch``
    y : array ``(k+1, *batch, d-1)`` of derivatives ``y^(j)``
    speed : array ``batch``, the axis velocity component
    """
    s = series[: k + 1]
    d = s.shape[-1]
    xs = s[..., axis]
    base = xs[0].copy()
    speed = xs[1].copy() if k >= 1 else np.full(base.shape, np.nan)
    others = [j for j in range(d) if j != axis]
    y = np.empty((k + 1,) + s.shape[1:-1] + (d - 1,))
    if k == 0:
        y[0] = s[0][..., others]
        return base, y, speed
    x1 = xs.copy()
    x1[0] = 0.0
    # a vertical velocity has no graph chart; use a dummy unit speed and mark the result NaN
    vertical = ~(x1[1] != 0)
    x1[1] = np.where(vertical, 1.0, x1[1])
    tinv = revert(x1)
    fact = np.array([math.factorial(j) for j in range(k + 1)], float)
    fact = fact.reshape((-1,) + (1,) * (s.ndim - 2))
    for c, j in enumerate(others):
        y[..., c] = compose(s[..., j], tinv) * fact
    if np.ndim(vertical) == 0:
        if vertical:
            y[:] = np.nan
    else:
        y[:, vertical] = np.nan
    return base, y, speed


def project_jet(H: HamiltonianModel, x0, k: int, axis: int | None = None,
                axis_margin: float = AXIS_MARGIN) -> CurveJet:
    """k-jet of the projected orbit through ``x0`` as a graph over ``axis``.

    The axis defaults to the dominant component of ``d pi_Q X_H``.

    Raises
    ------
    AxisMarginError
        If the axis velocity component is below ``axis_margin * |d pi_Q X_H|``.
    """
    z = _as_z(x0)
    series = orbit_taylor(H, z, max(k, 1))
    qser = series[..., : H.n]
    v = qser[1]
    if axis is None:
        axis = choose_axis(v)
    vn = float(np.linalg.norm(v))
    if not abs(v[axis]) >= axis_margin * vn or vn == 0:
        raise AxisMarginError(
            f"|dq_{axis + 1}(X)| = {abs(v[axis]):.3e} below margin {axis_margin} * {vn:.3e}")
    base, y, speed = graph_derivatives(qser, axis, k)
    return CurveJet(int(axis), float(base), y[0].copy(), y[1:].copy(), k, int(np.sign(v[axis])))


def align_jets(H: HamiltonianModel, x1, x2, k: int, axis_margin: float = AXIS_MARGIN):
    """Jets of two orbits on a common axis (the first orbit's dominant axis)."""
    j1 = project_jet(H, x1, k, axis_margin=axis_margin)
    try:
        j2 = project_jet(H, x2, k, axis=j1.axis, axis_margin=axis_margin)
    except AxisMarginError as exc:
        raise ChartMismatchError(str(exc)) from None
    return j1, j2


def tangency_order(j1: CurveJet, j2: CurveJet, k_max: int = K_MAX, jet_tol: float = JET_TOL):
    """Order of transversality of two jets at a common marked point.

    Returns the smallest ``r <= min(k_max, k)`` whose derivatives ``y^(r)``
    differ by more than ``jet_tol * max(1, |y1^(r)|, |y2^(r)|)``; ``r = 0``
    means the curves do not meet at the marked point.  Returns ``TOP`` when
    every examined order agrees and ``-1`` when the marked points lie over
    different base coordinates (the jets are not comparable).

    Raises
    ------
    ChartMismatchError
        If the jets use different graph axes.
    """
    if j1.axis != j2.axis:
        raise ChartMismatchError("jets use different graph axes; re-project on a common axis")
    if abs(j1.base - j2.base) > jet_tol * max(1.0, abs(j1.base), abs(j2.base)):
        return -1
    a, b = j1.all_coeffs, j2.all_coeffs
    top = min(k_max, j1.k, j2.k)
    for r in range(top + 1):
        scale = max(1.0, float(np.max(np.abs(a[r]))), float(np.max(np.abs(b[r]))))
        if np.max(np.abs(a[r] - b[r])) > jet_tol * scale:
            return r
    return TOP


def isolation_radius(j1: CurveJet, j2: CurveJet, r: int, bound: float,
                     window: float = np.inf, warn_below: float = 1e-6) -> float:
    """Radius around the marked point free of further intersections.

    With ``D = y2 - y1`` vanishing to order ``r`` at the marked point,
    Taylor's theorem gives ``|D_c(tau)| >= |D_c^(r)| |tau|^r/r! - M |tau|^(r+1)/(r+1)!``
    for each component ``c``, where ``M = bound`` dominates
    ``|D^(r+1)|`` on the window.  Hence ``D != 0`` for
    ``0 < |tau| < (r+1) max_c |D_c^(r)| / M``.

    A tiny result signals that the graph chart degenerates (velocity nearly
    orthogonal to the axis); a warning is issued instead of an error.
    """
    if r < 0 or not np.isfinite(r):
        raise ValueError("isolation radius needs a finite transversality order r >= 0")
    gap = float(np.max(np.abs(j2.all_coeffs[r] - j1.all_coeffs[r])))
    if gap == 0:
        raise ValueError(f"jets agree at order {r}")
    eps = window if bound <= 0 else min(window, (r + 1) * gap / bound)
    if eps < warn_below:
        warnings.warn(f"isolation radius {eps:.2e} is degenerate; the graph chart may be nearly vertical",
                      RuntimeWarning, stacklevel=2)
    return float(eps)


def graph_function(orbit, axis: int, t_range=None) -> Callable:
    """Graph map ``x -> y(x)`` of a projected orbit over ``axis``.

    ``orbit`` is a :class:`podex.flow.Orbit`; the axis coordinate must be
    monotone on ``t_range`` (default: whole window).  Points are located by
    bracketed root finding on the dense output.
    """
    t0, t1 = t_range if t_range is not None else orbit.window
    n = orbit.n

    def q_at(t):
        return orbit.evaluate(t)[..., :n]

    def y(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((xs.size, n - 1))
        for i, xv in enumerate(xs.ravel()):
            t = brentq(lambda s: q_at(s)[axis] - xv, t0, t1, xtol=1e-15, rtol=1e-15)
            out[i] = np.delete(q_at(t), axis)
        return out.reshape(np.shape(x) + (n - 1,))

    return y


def jet_derivative_bound(H: HamiltonianModel, points: np.ndarray, axis: int, order: int,
                         safety: float = 2.0) -> float:
    """Sampled bound on ``|y^(order)|`` over orbit points ``(N, 2n)``, times ``safety``."""
    pts = np.asarray(points, dtype=float)
    series = orbit_taylor(H, pts, order)
    _, y, _ = graph_derivatives(series[..., : H.n], axis, order)
    return safety * float(np.max(np.abs(y[order])))


@dataclass(frozen=True)
class Intersection:
    """A crossing of two projected orbits at times ``t1``, ``t2``."""

    t1: float
    t2: float
    point: np.ndarray
    distance: float


def find_intersections(orbit1, orbit2, step: float = 1e-2, tol: float = 1e-9) -> list[Intersection]:
    """Base-point intersections of two projected orbits.

    Both curves are sampled at arclength spacing about ``step``; sample
    pairs closer than ``2 * step`` seed a least-squares refinement of
    ``|q1(t1) - q2(t2)|`` on the dense outputs.  Refined pairs with
    distance above ``tol`` are discarded and duplicates (time gap below
    ``step``) merged.
    """
    from scipy.optimize import least_squares
    from scipy.spatial import cKDTree

    def samples(o):
        q = o.z[:, : o.n]
        seg = np.linalg.norm(np.diff(q, axis=0), axis=1)
        ts = [o.t[:1]]
        for i, L in enumerate(seg):
            m = max(1, int(math.ceil(L / step)))
            ts.append(np.linspace(o.t[i], o.t[i + 1], m + 1)[1:])
        t = np.concatenate(ts)
        return t, o.base_path(t)

    ta, qa = samples(orbit1)
    tb, qb = samples(orbit2)
    tree = cKDTree(qb)
    cand = []
    for i, nb in enumerate(tree.query_ball_point(qa, 2 * step)):
        for j in nb:
            cand.append((ta[i], tb[j]))
    lo = np.array([orbit1.window[0], orbit2.window[0]])
    hi = np.array([orbit1.window[1], orbit2.window[1]])
    found: list[Intersection] = []
    for t1, t2 in cand:
        if any(abs(t1 - f.t1) < step and abs(t2 - f.t2) < step for f in found):
            continue
        res = least_squares(lambda x: orbit1.base_path(x[0]) - orbit2.base_path(x[1]),
                            np.clip([t1, t2], lo, hi), bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        d = float(np.linalg.norm(res.fun))
        if d > tol:
            continue
        s1, s2 = float(res.x[0]), float(res.x[1])
        if any(abs(s1 - f.t1) < step and abs(s2 - f.t2) < step for f in found):
            continue
        found.append(Intersection(s1, s2, orbit1.base_path(s1), d))
    return sorted(found, key=lambda f: (f.t1, f.t2))


def _graph_samples(orbit, t_mark: float, axis: int, radius: float, count: int):
    """Dense samples ``(x, y)`` of a projected orbit with ``|x - x*| <= radius``, sorted in ``x``."""
    v = orbit.H.vector_field(orbit.evaluate(t_mark))[: orbit.n]
    speed = abs(float(v[axis]))
    if speed == 0:
        raise AxisMarginError("orbit velocity has no component along the graph axis")
    lo, hi = orbit.window
    half = 2.0 * radius / speed
    t = np.linspace(max(lo, t_mark - half), min(hi, t_mark + half), count)
    q = orbit.base_path(t)
    x = q[:, axis]
    dx = np.diff(x)
    if not (np.all(dx > 0) or np.all(dx < 0)):
        raise AxisMarginError("projected orbit is not a graph over the axis near the crossing")
    order = np.argsort(x)
    return x[order], np.delete(q, axis, axis=1)[order]


def dense_isolation_check(orbit1, orbit2, t1: float, t2: float, j1: CurveJet, j2: CurveJet, r: int,
                          radius: float, samples: int = 10000) -> dict:
    """Sample ``D = y2 - y1`` on ``0 < |x - x*| < radius`` and look for another zero.

    The component ``c`` with the largest order-``r`` gap is the one the
    isolation bound controls; a second intersection would force a zero of
    ``D_c``, so a sign change of ``D_c`` on either side of ``x*`` (or an
    exact zero) is reported.  Orbits that do not cover the whole window
    are checked on the covered part.
    """
    axis = j1.axis
    x_star = j1.base
    c = int(np.argmax(np.abs(j2.all_coeffs[r] - j1.all_coeffs[r])))
    x1, y1 = _graph_samples(orbit1, t1, axis, radius, 4 * samples)
    x2, y2 = _graph_samples(orbit2, t2, axis, radius, 4 * samples)
    a = max(x1[0], x2[0], x_star - radius)
    b = min(x1[-1], x2[-1], x_star + radius)
    xs = np.linspace(a, b, samples + 2)[1:-1]
    xs = xs[xs != x_star]
    D = np.interp(xs, x2, y2[:, c]) - np.interp(xs, x1, y1[:, c])
    # skip the few samples where D is within interpolation noise of the marked zero
    noise = 1e-9 * max(1.0, float(np.max(np.abs(D))))
    far = np.abs(D) > noise
    sign = np.sign(D)
    left, right = xs < x_star, xs > x_star
    changes = 0
    for side in (left, right):
        s = sign[side & far]
        changes += int(np.count_nonzero(s[1:] != s[:-1]))
    near = ~far & (np.abs(xs - x_star) > 1e-3 * radius)
    return {"samples": int(xs.size), "component": c + (c >= axis) + 1, "covered": [float(a), float(b)],
            "sign_changes": changes, "near_zero": int(np.count_nonzero(near)),
            "isolated": changes == 0 and not np.any(near)}
