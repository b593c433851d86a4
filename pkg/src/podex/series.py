"""Numerical backends for compiled expressions.

Three backends evaluate a :class:`podex.expr.Program`:

* :class:`FloatBackend` on batched numpy arrays,
* :class:`TaylorBackend` on truncated univariate Taylor series stored
  coefficient-major as arrays of shape ``(L, *batch)``,
* :class:`MultiBackend` on truncated multivariate series (all monomials up to a
  total degree) stored as arrays of shape ``(M, *batch)``.

Domain violations (log/sqrt/fractional power of a nonpositive argument,
division by zero) raise :class:`podex.expr.DomainError` in strict mode and
produce NaN otherwise, so that batched solvers can discard bad samples.
"""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy import sparse

from .expr import DomainError, to_string


def _flag(strict: bool, bad, message: str, node) -> None:
    if strict and np.any(bad):
        raise DomainError(message, to_string(node) if node is not None else "?")


# ------------------------------------------------------------------ floats

class FloatBackend:
    """Elementwise evaluation on numpy arrays of a common batch shape."""

    def __init__(self, strict: bool = True):
        self.strict = strict

    def const(self, value, like):
        if like is None:
            return np.float64(value)
        return np.full(np.shape(like), value)

    def add(self, a, b, node):
        return a + b

    def mul(self, a, b, node):
        return a * b

    def neg(self, a, node):
        return -a

    def div(self, a, b, node):
        bad = b == 0
        _flag(self.strict, bad, "division by zero", node)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(bad, np.nan, a / np.where(bad, 1.0, b))

    def powr(self, a, c, node):
        bad = a <= 0
        _flag(self.strict, bad, "fractional power of nonpositive argument", node)
        with np.errstate(invalid="ignore"):
            return np.where(bad, np.nan, np.abs(a) ** c)

    def exp(self, a, node):
        return np.exp(a)

    def log(self, a, node):
        bad = a <= 0
        _flag(self.strict, bad, "log of nonpositive argument", node)
        return np.where(bad, np.nan, np.log(np.where(bad, 1.0, a)))

    def sqrt(self, a, node):
        bad = a < 0
        _flag(self.strict, bad, "sqrt of negative argument", node)
        return np.where(bad, np.nan, np.sqrt(np.abs(a)))

    def sin(self, a, node):
        return np.sin(a)

    def cos(self, a, node):
        return np.cos(a)

    def safepos(self, a, node):
        return np.where(a > 0, a, 1.0)

    def maskpos(self, a, body, node):
        return np.where(a > 0, body, 0.0)

    def gate(self, g, a, b, node):
        return np.where(g == 0, b, a)


# ------------------------------------------------------ univariate series

def series_const(value, length: int, batch=()) -> np.ndarray:
    out = np.zeros((length,) + tuple(batch))
    out[0] = value
    return out


def smul(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cauchy product of two truncated series (same length)."""
    L = u.shape[0]
    if u.ndim == 1 and v.ndim == 1:
        return np.convolve(u, v)[:L]
    w = u[0] * v
    for i in range(1, L):
        w[i:] += u[i] * v[: L - i]
    return w


def sdiv(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    L = u.shape[0]
    inv0 = 1.0 / v[0]
    if u.ndim == 1 and v.ndim == 1:
        w = np.empty(L)
        for j in range(L):
            w[j] = (u[j] - v[1: j + 1] @ w[j - 1:: -1]) * inv0 if j else u[0] * inv0
        return w
    w = np.empty(np.broadcast_shapes(u.shape, v.shape))
    for j in range(L):
        acc = u[j]
        if j:
            acc = acc - np.einsum("i...,i...->...", v[1: j + 1], w[j - 1:: -1] if j > 1 else w[:1])
        w[j] = acc * inv0
    return w


def _rev(w, j):
    """``w[j-1], ..., w[0]`` as an array (j >= 1)."""
    return w[j - 1:: -1] if j > 1 else w[:1]


def sexp(u: np.ndarray) -> np.ndarray:
    L = u.shape[0]
    w = np.empty_like(u)
    w[0] = np.exp(u[0])
    if L > 1:
        k = np.arange(1, L, dtype=float).reshape((-1,) + (1,) * (u.ndim - 1))
        ku = k * u[1:]
        for j in range(1, L):
            w[j] = np.einsum("i...,i...->...", ku[:j], _rev(w, j)) / j
    return w


def slog(u: np.ndarray) -> np.ndarray:
    L = u.shape[0]
    w = np.empty_like(u)
    w[0] = np.log(u[0])
    inv0 = 1.0 / u[0]
    if L > 1:
        k = np.arange(1, L, dtype=float).reshape((-1,) + (1,) * (u.ndim - 1))
        for j in range(1, L):
            acc = u[j]
            if j > 1:
                acc = acc - np.einsum("i...,i...->...", k[: j - 1] * w[1:j], u[j - 1: 0: -1]) / j
            w[j] = acc * inv0
    return w


def ssqrt(u: np.ndarray) -> np.ndarray:
    L = u.shape[0]
    w = np.empty_like(u)
    w[0] = np.sqrt(u[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 0.5 / w[0]
    for j in range(1, L):
        acc = u[j]
        if j > 1:
            acc = acc - np.einsum("i...,i...->...", w[1:j], w[j - 1: 0: -1])
        w[j] = acc * inv
    return w


def spowr(u: np.ndarray, a: float) -> np.ndarray:
    L = u.shape[0]
    w = np.empty_like(u)
    w[0] = u[0] ** a
    inv0 = 1.0 / u[0]
    for j in range(1, L):
        i = np.arange(1, j + 1, dtype=float).reshape((-1,) + (1,) * (u.ndim - 1))
        coef = a * i - (j - i)
        w[j] = np.einsum("i...,i...->...", coef * u[1: j + 1], _rev(w, j)) * inv0 / j
    return w


def ssincos(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    L = u.shape[0]
    s = np.empty_like(u)
    c = np.empty_like(u)
    s[0] = np.sin(u[0])
    c[0] = np.cos(u[0])
    if L > 1:
        k = np.arange(1, L, dtype=float).reshape((-1,) + (1,) * (u.ndim - 1))
        ku = k * u[1:]
        for j in range(1, L):
            s[j] = np.einsum("i...,i...->...", ku[:j], _rev(c, j)) / j
            c[j] = -np.einsum("i...,i...->...", ku[:j], _rev(s, j)) / j
    return s, c


class TaylorBackend:
    """Truncated univariate Taylor series, arrays of shape ``(L, *batch)``."""

    def __init__(self, strict: bool = False):
        self.strict = strict

    def const(self, value, like):
        return series_const(value, like.shape[0], like.shape[1:])

    def add(self, a, b, node):
        return a + b

    def mul(self, a, b, node):
        return smul(a, b)

    def neg(self, a, node):
        return -a

    def _guard(self, x0, bad, message, node):
        _flag(self.strict, bad, message, node)
        return bad

    def div(self, a, b, node):
        bad = self._guard(b[0], b[0] == 0, "division by zero", node)
        if np.any(bad):
            b = np.where(bad, 1.0, b)
            return np.where(bad, np.nan, sdiv(a, b))
        return sdiv(a, b)

    def powr(self, a, c, node):
        bad = self._guard(a[0], a[0] <= 0, "fractional power of nonpositive argument", node)
        if np.any(bad):
            return np.where(bad, np.nan, spowr(np.where(bad, 1.0, a), c))
        return spowr(a, c)

    def exp(self, a, node):
        return sexp(a)

    def log(self, a, node):
        bad = self._guard(a[0], a[0] <= 0, "log of nonpositive argument", node)
        if np.any(bad):
            return np.where(bad, np.nan, slog(np.where(bad, 1.0, a)))
        return slog(a)

    def sqrt(self, a, node):
        # sqrt is not differentiable at 0, so a zero constant term is a domain error
        bad = self._guard(a[0], a[0] <= 0, "sqrt of nonpositive argument", node)
        if np.any(bad):
            out = np.where(bad, np.nan, ssqrt(np.where(bad, 1.0, a)))
            out[0] = np.where(a[0] == 0, 0.0, out[0])
            return out
        return ssqrt(a)

    def sin(self, a, node):
        return ssincos(a)[0]

    def cos(self, a, node):
        return ssincos(a)[1]

    def safepos(self, a, node):
        pos = a[0] > 0
        if np.all(pos):
            return a
        one = series_const(1.0, a.shape[0], a.shape[1:])
        return np.where(pos, a, one)

    def maskpos(self, a, body, node):
        pos = a[0] > 0
        if np.all(pos):
            return body
        return np.where(pos, body, 0.0)

    def gate(self, g, a, b, node):
        out = g[0] == 0
        if not np.any(out):
            return a
        if np.all(out):
            return b
        return np.where(out, b, a)


def taylor_of_function(name: str, x0: np.ndarray, length: int, data=None) -> np.ndarray:
    """Taylor coefficients of ``f(x0 + t)`` for a primitive ``f`` (batched)."""
    x0 = np.asarray(x0, dtype=float)
    u = np.zeros((length,) + x0.shape)
    u[0] = x0
    if length > 1:
        u[1] = 1.0
    if name == "exp":
        return sexp(u)
    if name == "log":
        return slog(u)
    if name == "sqrt":
        return ssqrt(u)
    if name == "sin":
        return ssincos(u)[0]
    if name == "cos":
        return ssincos(u)[1]
    if name == "powr":
        return spowr(u, data)
    if name == "recip":
        return sdiv(series_const(1.0, length, x0.shape), u)
    raise ValueError(name)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Coefficients of ``outer(inner(x))`` where ``inner`` has zero constant term.

    ``outer`` and ``inner`` have shape ``(L, *batch)``; Horner evaluation.
    """
    L = outer.shape[0]
    if np.any(inner[0] != 0):
        raise ValueError("inner series must vanish at 0")
    w = series_const(0.0, L, np.broadcast_shapes(outer.shape[1:], inner.shape[1:]))
    w[0] = outer[L - 1]
    for m in range(L - 2, -1, -1):
        w = smul(w, inner)
        w[0] += outer[m]
    return w


def revert(f: np.ndarray) -> np.ndarray:
    """Compositional inverse ``g`` of a series ``f`` with ``f0 = 0``, ``f1 != 0``."""
    L = f.shape[0]
    if np.any(f[0] != 0):
        raise ValueError("series must vanish at 0")
    g = np.zeros_like(f)
    if L < 2:
        return g
    g[1] = 1.0 / f[1]
    # fixed point g <- g - (f(g) - x)/f1, each sweep gains one correct order
    ident = np.zeros_like(f)
    ident[1] = 1.0
    for _ in range(L - 2):
        g = g - (compose(f, g) - ident) / f[1]
    return g


def series_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` with series entries.

    ``A`` has shape ``(m, m, L, *batch)``, ``b`` has shape ``(m, L, *batch)``.
    The constant term matrix is factored once; higher coefficients follow
    from ``A0 x_j = b_j - sum_{i>=1} A_i x_{j-i}``.
    """
    m = A.shape[0]
    L = A.shape[2]
    batch = A.shape[3:]
    A0 = np.moveaxis(A[:, :, 0], (0, 1), (-2, -1))  # (*batch, m, m)
    x = np.zeros((m, L) + batch)
    inv = np.linalg.inv(A0)
    for j in range(L):
        rhs = b[:, j].copy()
        for i in range(1, j + 1):
            rhs -= np.einsum("ab...,b...->a...", A[:, :, i], x[:, j - i])
        x[:, j] = np.moveaxis(np.einsum("...ab,...b->...a", inv, np.moveaxis(rhs, 0, -1)), -1, 0)
    return x


# ---------------------------------------------------- multivariate series

@lru_cache(maxsize=None)
def monomials(nvars: int, order: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples of total degree <= order, graded then reverse-lex."""
    out = []
    for d in range(order + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), d):
            e = [0] * nvars
            for v in combo:
                e[v] += 1
            out.append(tuple(e))
    return tuple(out)


class MultiAlgebra:
    """Truncated polynomial algebra in ``nvars`` variables to total degree ``order``."""

    def __init__(self, nvars: int, order: int):
        self.nvars = nvars
        self.order = order
        self.monos = monomials(nvars, order)
        self.index = {m: i for i, m in enumerate(self.monos)}
        self.size = len(self.monos)
        E = np.array(self.monos, dtype=np.int64).reshape(self.size, nvars)
        deg = E.sum(axis=1)
        radix = (order + 1) ** np.arange(nvars, dtype=np.int64)
        codes = E @ radix
        sort = np.argsort(codes)
        I, J, S = [], [], []
        for i in range(self.size):
            js = np.nonzero(deg <= order - deg[i])[0]
            c = (E[i] + E[js]) @ radix
            I.append(np.full(len(js), i))
            J.append(js)
            S.append(sort[np.searchsorted(codes[sort], c)])
        I, J, S = np.concatenate(I), np.concatenate(J), np.concatenate(S)
        self.I = I
        self.J = J
        self.scatter = sparse.csr_matrix(
            (np.ones(len(S)), (np.array(S), np.arange(len(S)))), shape=(self.size, len(S)))
        self.factorials = np.array([math.prod(math.factorial(k) for k in m) for m in self.monos], float)

    def variable(self, i: int, value) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        out = np.zeros((self.size,) + value.shape)
        out[0] = value
        if self.order >= 1:
            e = [0] * self.nvars
            e[i] = 1
            out[self.index[tuple(e)]] = 1.0
        return out

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        batch = np.broadcast_shapes(a.shape[1:], b.shape[1:])
        prod = (a[self.I] * b[self.J]).reshape(len(self.I), -1)
        return np.asarray(self.scatter @ prod).reshape((self.size,) + batch)

    def apply(self, coeffs: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``sum_m coeffs[m] (a - a0)^m`` with ``coeffs`` of shape ``(order+1, *batch)``."""
        delta = a.copy()
        delta[0] = 0.0
        out = np.zeros_like(a)
        out[0] = coeffs[self.order]
        for m in range(self.order - 1, -1, -1):
            out = self.mul(out, delta)
            out[0] += coeffs[m]
        return out


class MultiBackend:
    """Program backend over :class:`MultiAlgebra` values."""

    def __init__(self, algebra: MultiAlgebra, strict: bool = True):
        self.alg = algebra
        self.strict = strict

    def const(self, value, like):
        out = np.zeros_like(like)
        out[0] = value
        return out

    def add(self, a, b, node):
        return a + b

    def mul(self, a, b, node):
        return self.alg.mul(a, b)

    def neg(self, a, node):
        return -a

    def _fn(self, name, a, node, bad=None, message="", data=None):
        if bad is not None:
            _flag(self.strict, bad, message, node)
            x0 = np.where(bad, 1.0, a[0])
        else:
            x0 = a[0]
        out = self.alg.apply(taylor_of_function(name, x0, self.alg.order + 1, data), a)
        if bad is not None and np.any(bad):
            out = np.where(bad, np.nan, out)
        return out

    def div(self, a, b, node):
        return self.alg.mul(a, self._fn("recip", b, node, b[0] == 0, "division by zero"))

    def powr(self, a, c, node):
        return self._fn("powr", a, node, a[0] <= 0, "fractional power of nonpositive argument", c)

    def exp(self, a, node):
        return self._fn("exp", a, node)

    def log(self, a, node):
        return self._fn("log", a, node, a[0] <= 0, "log of nonpositive argument")

    def sqrt(self, a, node):
        return self._fn("sqrt", a, node, a[0] <= 0, "sqrt of nonpositive argument")

    def sin(self, a, node):
        return self._fn("sin", a, node)

    def cos(self, a, node):
        return self._fn("cos", a, node)

    def safepos(self, a, node):
        one = np.zeros_like(a)
        one[0] = 1.0
        return np.where(a[0] > 0, a, one)

    def maskpos(self, a, body, node):
        return np.where(a[0] > 0, body, 0.0)

    def gate(self, g, a, b, node):
        return np.where(g[0] == 0, b, a)
