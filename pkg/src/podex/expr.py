"""Expression trees for scalar fields on phase space and on contact charts.

Expressions are immutable and hash-consed: building the same tree twice
returns the same object, so structural equality is identity and common
subexpressions are shared automatically.  Derivatives are taken
symbolically (:func:`diff`); numerical evaluation goes through a compiled
:class:`Program` that runs on any backend in :mod:`podex.series` (plain
floats, univariate Taylor series, multivariate truncated series).

Infix syntax accepted by :func:`parse`::

    (p1^2 + p2^2)/2 - 1/2 + 0.1*sin(q1)*p2

Operators ``+ - * / ^ **``; functions ``sin cos exp log sqrt``; the smooth
cutoff primitive ``spos(x)`` (``exp(-1/x)`` for ``x > 0``, else 0) and its
weighted form ``spos(x, m)`` (``spos(x) * x^-m``); ``gate(g, a, b)`` which is
``b`` wherever ``g == 0`` and ``a`` elsewhere.  The guard ``g`` of a gate must be
flat where it vanishes (built from ``spos``), which makes the glued function
smooth and lets derivatives pass through the gate branchwise.
"""
from __future__ import annotations

import ast
import math
import weakref
from typing import Iterable, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt")
_CONSTANTS = {"pi": math.pi, "e": math.e}


class ParseError(ValueError):
    """Malformed expression string; ``position`` is 1-based column."""

    def __init__(self, message: str, position: int, source: str):
        self.position = position
        self.source = source
        super().__init__(f"{message} at position {position}: {source!r}")


class DomainError(ArithmeticError):
    """log/sqrt/real power of a nonpositive argument, or division by zero."""

    def __init__(self, message: str, subexpression: str):
        self.subexpression = subexpression
        super().__init__(f"{message} in subexpression {subexpression}")


_INTERN: "weakref.WeakValueDictionary[tuple, Expr]" = weakref.WeakValueDictionary()


class Expr:
    __slots__ = ("op", "args", "data", "_key", "_hash", "__weakref__")

    def __new__(cls, op: str, args: tuple = (), data=None):
        key = (op, tuple(id(a) for a in args), data)
        hit = _INTERN.get(key)
        if hit is not None:
            return hit
        self = object.__new__(cls)
        self.op = op
        self.args = args
        self.data = data
        self._key = key
        self._hash = hash(key)
        _INTERN[key] = self
        return self

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return self is other

    def __reduce__(self):
        return (parse, (to_string(self),))

    # arithmetic sugar
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return add(self, neg(as_expr(other)))

    def __rsub__(self, other):
        return add(as_expr(other), neg(self))

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __pow__(self, other):
        return power(self, as_expr(other))

    def __rpow__(self, other):
        return power(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        return to_string(self)

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self) -> float:
        return self.data

    def variables(self) -> set[str]:
        return {node.data for node in walk(self) if node.op == "var"}


def const(value: float) -> Expr:
    value = float(value)
    if value == 0.0:
        value = 0.0  # fold -0.0
    return Expr("const", (), value)


def var(name: str) -> Expr:
    return Expr("var", (), name)


def as_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return const(float(x))
    if isinstance(x, str):
        return parse(x)
    raise TypeError(f"cannot convert {type(x).__name__} to Expr")


ZERO = const(0.0)
ONE = const(1.0)


def _c(e: Expr, v: float) -> bool:
    return e.op == "const" and e.data == v


def add(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.data + b.data)
    if _c(a, 0.0):
        return b
    if _c(b, 0.0):
        return a
    return Expr("add", (a, b))


def neg(a: Expr) -> Expr:
    if a.is_const:
        return const(-a.data)
    if a.op == "neg":
        return a.args[0]
    return Expr("neg", (a,))


def mul(a: Expr, b: Expr) -> Expr:
    if a.is_const and b.is_const:
        return const(a.data * b.data)
    if _c(a, 0.0) or _c(b, 0.0):
        return ZERO
    if _c(a, 1.0):
        return b
    if _c(b, 1.0):
        return a
    if _c(a, -1.0):
        return neg(b)
    if _c(b, -1.0):
        return neg(a)
    return Expr("mul", (a, b))


def div(a: Expr, b: Expr) -> Expr:
    if _c(b, 0.0):
        raise DomainError("division by constant zero", to_string(a) + "/0")
    if a.is_const and b.is_const:
        return const(a.data / b.data)
    if _c(a, 0.0):
        return ZERO
    if _c(b, 1.0):
        return a
    return Expr("div", (a, b))


def power(a: Expr, b: Expr) -> Expr:
    if b.is_const:
        c = b.data
        if c == 0.0:
            return ONE
        if c == 1.0:
            return a
        if a.is_const:
            if a.data <= 0 and not float(c).is_integer():
                raise DomainError("non-integer power of nonpositive constant", f"{a.data}^{c}")
            return const(a.data ** c)
    return Expr("pow", (a, b))


def func(name: str, a: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name}")
    if a.is_const:
        x = a.data
        if name in ("log", "sqrt") and (x <= 0 if name == "log" else x < 0):
            raise DomainError(f"{name} of nonpositive constant", f"{name}({x})")
        return const(getattr(math, name)(x))
    return Expr(name, (a,))


def sin(a):
    return func("sin", as_expr(a))


def cos(a):
    return func("cos", as_expr(a))


def exp(a):
    return func("exp", as_expr(a))


def log(a):
    return func("log", as_expr(a))


def sqrt(a):
    return func("sqrt", as_expr(a))


def spos(a, m: int = 0) -> Expr:
    """``exp(-1/a) * a**-m`` for ``a > 0`` and exactly 0 otherwise (C-infinity)."""
    a = as_expr(a)
    m = int(m)
    if a.is_const:
        x = a.data
        return const(math.exp(-1.0 / x) * x ** (-m) if x > 0 else 0.0)
    return Expr("spos", (a,), m)


def gate(g, inside, outside) -> Expr:
    """Piecewise glue: ``outside`` where ``g == 0``, else ``inside``.

    Used for cutoff blends so that the result equals ``outside`` bitwise
    off the support of ``g``.
    """
    g, inside, outside = as_expr(g), as_expr(inside), as_expr(outside)
    if inside is outside:
        return inside
    if _c(g, 0.0):
        return outside
    return Expr("gate", (g, inside, outside))


def bump(s) -> Expr:
    """Smooth bump of ``s``: 1 at ``s = 0``, support ``s < 1``."""
    s = as_expr(s)
    return const(math.e) * spos(1.0 - s)


def plateau(s, inner: float = 0.5) -> Expr:
    """Smooth plateau of ``s``: 1 for ``s <= inner``, 0 for ``s >= 1``."""
    s = as_expr(s)
    a = spos(1.0 - s)
    return gate(a, a / (a + spos(s - inner)), ZERO)


def walk(root: Expr) -> list[Expr]:
    """Nodes of the DAG in topological order (children before parents)."""
    order: list[Expr] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for child in reversed(node.args):
            if id(child) not in seen:
                stack.append((child, False))
    return order


def count_nodes(e: Expr) -> int:
    return len(walk(e))


def substitute(e: Expr, mapping: dict[str, Expr]) -> Expr:
    mapping = {k: as_expr(v) for k, v in mapping.items()}
    memo: dict[int, Expr] = {}
    for node in walk(e):
        if node.op == "var":
            out = mapping.get(node.data, node)
        elif node.op == "const":
            out = node
        else:
            out = _rebuild(node, [memo[id(a)] for a in node.args])
        memo[id(node)] = out
    return memo[id(e)]


def _rebuild(node: Expr, args: list[Expr]) -> Expr:
    op = node.op
    if op == "add":
        return add(*args)
    if op == "mul":
        return mul(*args)
    if op == "div":
        return div(*args)
    if op == "neg":
        return neg(args[0])
    if op == "pow":
        return power(*args)
    if op in FUNCTIONS:
        return func(op, args[0])
    if op == "spos":
        return spos(args[0], node.data)
    if op == "gate":
        return gate(*args)
    raise ValueError(op)


def diff(e: Expr, name: str) -> Expr:
    """Symbolic partial derivative with respect to the variable ``name``."""
    memo: dict[int, Expr] = {}
    for node in walk(e):
        memo[id(node)] = _diff_node(node, name, memo)
    return memo[id(e)]


def _diff_node(node: Expr, name: str, memo) -> Expr:
    op = node.op
    if op == "const":
        return ZERO
    if op == "var":
        return ONE if node.data == name else ZERO
    d = [memo[id(a)] for a in node.args]
    if all(_c(x, 0.0) for x in d):
        return ZERO
    a = node.args[0]
    if op == "add":
        return add(d[0], d[1])
    if op == "neg":
        return neg(d[0])
    if op == "mul":
        b = node.args[1]
        return add(mul(d[0], b), mul(a, d[1]))
    if op == "div":
        b = node.args[1]
        return add(div(d[0], b), neg(div(mul(a, d[1]), mul(b, b))))
    if op == "pow":
        b = node.args[1]
        if b.is_const:
            return mul(mul(b, power(a, const(b.data - 1.0))), d[0])
        # a^b = exp(b log a)
        return mul(node, add(mul(d[1], log(a)), div(mul(b, d[0]), a)))
    if op == "sin":
        return mul(cos(a), d[0])
    if op == "cos":
        return neg(mul(sin(a), d[0]))
    if op == "exp":
        return mul(node, d[0])
    if op == "log":
        return div(d[0], a)
    if op == "sqrt":
        return div(d[0], mul(const(2.0), node))
    if op == "spos":
        m = node.data
        inner = spos(a, m + 2) if m == 0 else add(spos(a, m + 2), neg(mul(const(m), spos(a, m + 1))))
        return mul(inner, d[0])
    if op == "gate":
        return gate(node.args[0], d[1], d[2])
    raise ValueError(op)


def gradient(e: Expr, names: Sequence[str]) -> list[Expr]:
    return [diff(e, n) for n in names]


# ---------------------------------------------------------------- printing

_PREC = {"add": 1, "neg": 2, "mul": 3, "div": 3, "pow": 5}


def to_string(e: Expr) -> str:
    strs: dict[int, tuple[str, int]] = {}
    for node in walk(e):
        strs[id(node)] = _fmt(node, strs)
    return strs[id(e)][0]


def _num(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _fmt(node: Expr, strs) -> tuple[str, int]:
    op = node.op
    if op == "const":
        s = _num(node.data)
        return (f"({s})", 9) if node.data < 0 else (s, 9)
    if op == "var":
        return node.data, 9

    def wrap(child, prec, strict=False):
        s, p = strs[id(child)]
        return f"({s})" if (p < prec or (strict and p == prec)) else s

    if op == "add":
        a, b = node.args
        if b.op == "neg":
            return f"{wrap(a, 1)} - {wrap(b.args[0], 1, True)}", 1
        if b.op == "const" and b.data < 0:
            return f"{wrap(a, 1)} - {_num(-b.data)}", 1
        return f"{wrap(a, 1)} + {wrap(b, 1)}", 1
    if op == "neg":
        return f"-{wrap(node.args[0], 3)}", 2
    if op == "mul":
        a, b = node.args
        return f"{wrap(a, 3)}*{wrap(b, 3, True)}", 3
    if op == "div":
        a, b = node.args
        return f"{wrap(a, 3)}/{wrap(b, 3, True)}", 3
    if op == "pow":
        a, b = node.args
        return f"{wrap(a, 6)}^{wrap(b, 6)}", 5
    if op in FUNCTIONS:
        return f"{op}({strs[id(node.args[0])][0]})", 9
    if op == "spos":
        inner = strs[id(node.args[0])][0]
        return (f"spos({inner})" if node.data == 0 else f"spos({inner}, {node.data})"), 9
    if op == "gate":
        return "gate(" + ", ".join(strs[id(a)][0] for a in node.args) + ")", 9
    # internal ops produced by lower()
    inner = ", ".join(strs[id(a)][0] for a in node.args)
    return f"{op}({inner})", 9


# ----------------------------------------------------------------- parsing

def parse(source: str, variables: Iterable[str] | None = None) -> Expr:
    """Parse an infix expression; unknown names are rejected if ``variables`` is given."""
    allowed = set(variables) if variables is not None else None
    text = source.strip()
    if not text:
        raise ParseError("empty expression", 1, source)
    offset = len(source) - len(source.lstrip())
    # '^' means power; rewrite to '**' and remember where each column came from
    pieces, origin = [], []
    for i, ch in enumerate(text):
        if ch == "^":
            pieces.append("**")
            origin += [i, i]
        else:
            pieces.append(ch)
            origin.append(i)
    origin.append(len(text))
    rewritten = "".join(pieces)

    def column(col0: int) -> int:
        return origin[min(max(col0, 0), len(origin) - 1)] + 1 + offset

    try:
        tree = ast.parse(rewritten, mode="eval")
    except SyntaxError as exc:
        raise ParseError(exc.msg or "syntax error", column((exc.offset or 1) - 1), source) from None
    return _convert(tree.body, allowed, source, column)


def _convert(node, allowed, source, column) -> Expr:
    def fail(msg, n):
        raise ParseError(msg, column(getattr(n, "col_offset", 0)), source)

    def rec(n):
        if isinstance(n, ast.Constant):
            if isinstance(n.value, bool) or not isinstance(n.value, (int, float)):
                fail("unsupported literal", n)
            return const(n.value)
        if isinstance(n, ast.Name):
            if n.id in _CONSTANTS:
                return const(_CONSTANTS[n.id])
            if allowed is not None and n.id not in allowed:
                fail(f"unknown variable {n.id!r}", n)
            return var(n.id)
        if isinstance(n, ast.UnaryOp):
            if isinstance(n.op, ast.USub):
                return neg(rec(n.operand))
            if isinstance(n.op, ast.UAdd):
                return rec(n.operand)
            fail("unsupported unary operator", n)
        if isinstance(n, ast.BinOp):
            a, b = rec(n.left), rec(n.right)
            try:
                if isinstance(n.op, ast.Add):
                    return add(a, b)
                if isinstance(n.op, ast.Sub):
                    return add(a, neg(b))
                if isinstance(n.op, ast.Mult):
                    return mul(a, b)
                if isinstance(n.op, ast.Div):
                    return div(a, b)
                if isinstance(n.op, ast.Pow):
                    return power(a, b)
            except DomainError as exc:
                fail(str(exc), n)
            fail("unsupported operator", n)
        if isinstance(n, ast.Call):
            if not isinstance(n.func, ast.Name) or n.keywords:
                fail("unsupported call", n)
            name = n.func.id
            args = [rec(a) for a in n.args]
            if name in FUNCTIONS:
                if len(args) != 1:
                    fail(f"{name} takes one argument", n)
                try:
                    return func(name, args[0])
                except DomainError as exc:
                    fail(str(exc), n)
            if name == "spos":
                if len(args) == 1:
                    return spos(args[0])
                if len(args) == 2 and args[1].is_const and float(args[1].data).is_integer():
                    return spos(args[0], int(args[1].data))
                fail("spos takes (x) or (x, integer)", n)
            if name == "gate":
                if len(args) != 3:
                    fail("gate takes three arguments", n)
                return gate(*args)
            fail(f"unknown function {name!r}", n)
        fail(f"unsupported syntax {type(n).__name__}", n)

    return rec(node)


def phase_variables(n: int) -> list[str]:
    """Canonical variable order for phase space: q1..qn, p1..pn."""
    return [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]


# ---------------------------------------------------------------- programs

def _int_power(a: Expr, m: int) -> Expr:
    """``a**m`` for integer ``m >= 1`` by repeated squaring (shared via hash-consing)."""
    result = None
    base = a
    while m:
        if m & 1:
            result = base if result is None else Expr("mul", (result, base))
        m >>= 1
        if m:
            base = Expr("mul", (base, base))
    return result


def lower(e: Expr) -> Expr:
    """Rewrite into the primitive op set understood by numerical backends.

    Integer powers become multiplication chains (so ``p**2`` is fine at
    ``p = 0``) and ``spos`` becomes a masked ``exp(-1/x)`` expression.
    """
    memo: dict[int, Expr] = {}
    for node in walk(e):
        args = tuple(memo[id(a)] for a in node.args)
        op = node.op
        if op == "pow" and node.args[1].is_const:
            c = node.args[1].data
            if float(c).is_integer() and 1 <= abs(c) <= 64:
                out = _int_power(args[0], int(abs(c)))
                if c < 0:
                    out = Expr("div", (ONE, out))
            else:
                out = Expr("powr", (args[0],), float(c))
        elif op == "pow":
            out = Expr("exp", (Expr("mul", (args[1], Expr("log", (args[0],)))),))
        elif op == "spos":
            safe = Expr("safepos", (args[0],))
            inv = Expr("div", (ONE, safe))
            body = Expr("exp", (Expr("neg", (inv,)),))
            if node.data > 0:
                body = Expr("mul", (body, _int_power(inv, node.data)))
            elif node.data < 0:
                body = Expr("mul", (body, _int_power(safe, -node.data)))
            out = Expr("maskpos", (args[0], body))
        elif args == node.args:
            out = node
        else:
            out = Expr(op, args, node.data)
        memo[id(node)] = out
    return memo[id(e)]


class Program:
    """A compiled straight-line evaluation of several expressions.

    ``inputs`` names the variables in the order they are supplied to
    :meth:`run`.  Registers are released after their last use so batched
    series evaluation stays within memory.  A backend provides the methods
    ``const add mul neg div powr exp log sqrt sin cos safepos maskpos gate``;
    each receives its operands followed by the originating node.
    """

    def __init__(self, outputs: Sequence[Expr], inputs: Sequence[str]):
        self.inputs = list(inputs)
        self.outputs = [as_expr(o) for o in outputs]
        index = {name: i for i, name in enumerate(self.inputs)}
        lowered = [lower(o) for o in self.outputs]
        nodes: list[Expr] = []
        seen: set[int] = set()
        for out in lowered:
            for node in walk(out):
                if id(node) not in seen:
                    seen.add(id(node))
                    nodes.append(node)
        slot = {id(node): i for i, node in enumerate(nodes)}
        last_use = [-1] * len(nodes)
        for i, node in enumerate(nodes):
            for a in node.args:
                last_use[slot[id(a)]] = i
        keep = {slot[id(o)] for o in lowered}
        self.code = []
        for i, node in enumerate(nodes):
            if node.op == "var" and node.data not in index:
                raise KeyError(f"variable {node.data!r} not among program inputs {self.inputs}")
            args = tuple(slot[id(a)] for a in node.args)
            free = tuple(j for j in set(args) if last_use[j] == i and j not in keep)
            data = index[node.data] if node.op == "var" else node.data
            self.code.append((node.op, args, data, free, node))
        self.out_slots = [slot[id(o)] for o in lowered]

    def __len__(self):
        return len(self.code)

    def run(self, backend, values: Sequence) -> list:
        """Evaluate on ``backend`` with input arrays ``values`` (one per input name)."""
        regs: list = [None] * len(self.code)
        like = values[0] if len(values) else None
        for i, (op, args, data, free, node) in enumerate(self.code):
            if op == "var":
                r = values[data]
            elif op == "const":
                r = backend.const(data, like)
            elif op == "powr":
                r = backend.powr(regs[args[0]], data, node)
            else:
                r = getattr(backend, op)(*[regs[a] for a in args], node)
            regs[i] = r
            for j in free:
                regs[j] = None
        return [regs[s] for s in self.out_slots]
