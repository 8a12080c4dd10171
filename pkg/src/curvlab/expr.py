"""Scalar-field expression language on the torus with symbolic derivatives.

Grammar (EBNF):
    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := base ('^' int)?
    base   := number | 'x' | 'y' | 'pi' | func '(' expr (',' expr)* ')' | '(' expr ')'

Built-in functions: sin, cos, exp, log, abs, sqrt, min, max, and the
torus-aware primitives persq(x, y, cx, cy) (periodic squared distance to
(cx, cy)), perdiff(a, c) (signed periodic difference wrapped to [-1/2, 1/2)),
and bump(s) (exp(-1/s) for s > 0, else 0 -- a smooth one-sided cutoff used
to assemble plateau functions).

Derivatives at kinks of abs/min/max follow a right-sided convention: abs
uses sign(+1) at 0, min/max select their first argument on ties. perdiff
differentiates to 1 everywhere (its seam jump at distance 1/2 is a null
set; callers keep it under cutoffs that vanish there).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class ExprError(ValueError):
    """Parse or evaluation error, carrying a source position when known."""

    def __init__(self, message, pos=None, source=None):
        if pos is not None and source is not None:
            message = f"{message} at position {pos}: ...{source[max(0, pos - 8):pos + 8]!r}..."
        super().__init__(message)
        self.pos = pos


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


class Node:
    """Base expression node. Subclasses implement ev/d/emit."""

    def ev(self, x, y):
        raise NotImplementedError

    def d(self, var: str) -> "Node":
        raise NotImplementedError

    def emit(self) -> str:
        raise NotImplementedError

    def children(self):
        return ()

    # convenience operator sugar for building trees programmatically
    def __add__(self, other):
        return simplify(Bin("+", self, as_node(other)))

    def __radd__(self, other):
        return simplify(Bin("+", as_node(other), self))

    def __sub__(self, other):
        return simplify(Bin("-", self, as_node(other)))

    def __rsub__(self, other):
        return simplify(Bin("-", as_node(other), self))

    def __mul__(self, other):
        return simplify(Bin("*", self, as_node(other)))

    def __rmul__(self, other):
        return simplify(Bin("*", as_node(other), self))

    def __truediv__(self, other):
        return simplify(Bin("/", self, as_node(other)))

    def __neg__(self):
        return simplify(Bin("-", Num(0.0), self))


def as_node(v) -> Node:
    if isinstance(v, Node):
        return v
    return Num(float(v))


@dataclass(frozen=True)
class Num(Node):
    value: float

    def ev(self, x, y):
        return np.broadcast_to(np.float64(self.value), np.shape(x)).copy() if np.ndim(x) else self.value

    def d(self, var):
        return Num(0.0)

    def emit(self):
        return repr(self.value)


@dataclass(frozen=True)
class Var(Node):
    name: str  # 'x' or 'y'

    def ev(self, x, y):
        return x if self.name == "x" else y

    def d(self, var):
        return Num(1.0 if var == self.name else 0.0)

    def emit(self):
        return self.name


@dataclass(frozen=True)
class Bin(Node):
    op: str
    a: Node
    b: Node

    def children(self):
        return (self.a, self.b)

    def ev(self, x, y):
        a = self.a.ev(x, y)
        b = self.b.ev(x, y)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b

    def d(self, var):
        da, db = self.a.d(var), self.b.d(var)
        if self.op in "+-":
            return simplify(Bin(self.op, da, db))
        if self.op == "*":
            return simplify(Bin("+", Bin("*", da, self.b), Bin("*", self.a, db)))
        num = Bin("-", Bin("*", da, self.b), Bin("*", self.a, db))
        return simplify(Bin("/", num, Bin("*", self.b, self.b)))

    def emit(self):
        return f"({self.a.emit()} {self.op} {self.b.emit()})"


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    n: int

    def children(self):
        return (self.base,)

    def ev(self, x, y):
        return self.base.ev(x, y) ** self.n

    def d(self, var):
        if self.n == 0:
            return Num(0.0)
        inner = self.base.d(var)
        return simplify(
            Bin("*", Num(float(self.n)), Bin("*", Pow(self.base, self.n - 1), inner))
        )

    def emit(self):
        return f"({self.base.emit()})**{self.n}"


def _bump(s):
    with np.errstate(divide="ignore", over="ignore"):
        t = np.where(s > 0, s, 1.0)
        return np.where(s > 0, np.exp(-1.0 / t), 0.0)


def _bump_d(s):
    with np.errstate(divide="ignore", over="ignore"):
        t = np.where(s > 0, s, 1.0)
        return np.where(s > 0, np.exp(-1.0 / t) / (t * t), 0.0)


def _perdiff(a, c):
    d = a - c
    return d - np.floor(d + 0.5)


_FUNC_ARITY = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sqrt": 1,
    "min": 2,
    "max": 2,
    "bump": 1,
    "perdiff": 2,
    "persq": 4,
}


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple

    def children(self):
        return self.args

    def ev(self, x, y):
        a = [arg.ev(x, y) for arg in self.args]
        f = self.func
        if f == "sin":
            return np.sin(a[0])
        if f == "cos":
            return np.cos(a[0])
        if f == "exp":
            return np.exp(a[0])
        if f == "log":
            return np.log(a[0])
        if f == "abs":
            return np.abs(a[0])
        if f == "sqrt":
            return np.sqrt(a[0])
        if f == "min":
            return np.minimum(a[0], a[1])
        if f == "max":
            return np.maximum(a[0], a[1])
        if f == "bump":
            return _bump(a[0])
        if f == "perdiff":
            return _perdiff(a[0], a[1])
        if f == "persq":
            return _perdiff(a[0], a[2]) ** 2 + _perdiff(a[1], a[3]) ** 2
        raise ExprError(f"unknown function {f!r}")

    def d(self, var):
        a = self.args
        f = self.func
        if f == "sin":
            return simplify(Bin("*", Call("cos", a), a[0].d(var)))
        if f == "cos":
            return simplify(-Bin("*", Call("sin", a), a[0].d(var)))
        if f == "exp":
            return simplify(Bin("*", self, a[0].d(var)))
        if f == "log":
            return simplify(Bin("/", a[0].d(var), a[0]))
        if f == "sqrt":
            return simplify(Bin("/", a[0].d(var), Bin("*", Num(2.0), self)))
        if f == "abs":
            # right-sided at 0: sign(u) with sign(0) = +1
            du = a[0].d(var)
            return simplify(Where(Num(0.0), a[0], du, -du))
        if f == "min":
            return simplify(Where(a[0], a[1], a[0].d(var), a[1].d(var)))
        if f == "max":
            return simplify(Where(a[1], a[0], a[0].d(var), a[1].d(var)))
        if f == "bump":
            return simplify(Bin("*", _BumpD(a[0]), a[0].d(var)))
        if f == "perdiff":
            # derivative 1 a.e. (jump on the antipodal seam only)
            return simplify(Bin("-", a[0].d(var), a[1].d(var)))
        if f == "persq":
            tx = Bin("*", Bin("*", Num(2.0), Call("perdiff", (a[0], a[2]))),
                     Bin("-", a[0].d(var), a[2].d(var)))
            ty = Bin("*", Bin("*", Num(2.0), Call("perdiff", (a[1], a[3]))),
                     Bin("-", a[1].d(var), a[3].d(var)))
            return simplify(Bin("+", tx, ty))
        raise ExprError(f"unknown function {f!r}")

    def emit(self):
        return f"{self.func}({', '.join(arg.emit() for arg in self.args)})"


@dataclass(frozen=True)
class _BumpD(Node):
    """Derivative profile of bump: exp(-1/s)/s^2 for s > 0, else 0."""

    arg: Node

    def children(self):
        return (self.arg,)

    def ev(self, x, y):
        return _bump_d(self.arg.ev(x, y))

    def d(self, var):
        # d/ds [e^{-1/s} s^-2] = e^{-1/s} (s^-4 - 2 s^-3); keep it closed-form
        return simplify(Bin("*", _BumpD2(self.arg), self.arg.d(var)))

    def emit(self):
        return f"bumpd({self.arg.emit()})"


@dataclass(frozen=True)
class _BumpD2(Node):
    arg: Node

    def children(self):
        return (self.arg,)

    def ev(self, x, y):
        s = self.arg.ev(x, y)
        with np.errstate(divide="ignore", over="ignore"):
            t = np.where(s > 0, s, 1.0)
            return np.where(s > 0, np.exp(-1.0 / t) * (1.0 - 2.0 * t) / t**4, 0.0)

    def d(self, var):
        raise ExprError("third derivatives of bump are not implemented")

    def emit(self):
        return f"bumpd2({self.arg.emit()})"


@dataclass(frozen=True)
class Where(Node):
    """Piecewise selector: (a <= b) ? t : e. Ties take the 'then' branch."""

    a: Node
    b: Node
    then: Node
    other: Node

    def children(self):
        return (self.a, self.b, self.then, self.other)

    def ev(self, x, y):
        return np.where(
            self.a.ev(x, y) <= self.b.ev(x, y), self.then.ev(x, y), self.other.ev(x, y)
        )

    def d(self, var):
        return simplify(Where(self.a, self.b, self.then.d(var), self.other.d(var)))

    def emit(self):
        return f"where({self.a.emit()} <= {self.b.emit()}, {self.then.emit()}, {self.other.emit()})"


# ---------------------------------------------------------------------------
# simplification (constant folding and identities)
# ---------------------------------------------------------------------------


def _const(node):
    return node.value if isinstance(node, Num) else None


def simplify(node: Node) -> Node:
    if isinstance(node, Bin):
        a, b = node.a, node.b
        ca, cb = _const(a), _const(b)
        if ca is not None and cb is not None:
            if node.op == "/" and cb == 0.0:
                return node
            return Num({"+": ca + cb, "-": ca - cb, "*": ca * cb, "/": ca / cb if cb else 0.0}[node.op])
        if node.op == "+":
            if ca == 0.0:
                return b
            if cb == 0.0:
                return a
        elif node.op == "-":
            if cb == 0.0:
                return a
        elif node.op == "*":
            if ca == 0.0 or cb == 0.0:
                return Num(0.0)
            if ca == 1.0:
                return b
            if cb == 1.0:
                return a
        elif node.op == "/":
            if ca == 0.0:
                return Num(0.0)
            if cb == 1.0:
                return a
    elif isinstance(node, Pow):
        if node.n == 0:
            return Num(1.0)
        if node.n == 1:
            return node.base
        c = _const(node.base)
        if c is not None:
            return Num(c**node.n)
    elif isinstance(node, Where):
        if node.then == node.other:
            return node.then
    elif isinstance(node, Call):
        if all(isinstance(a, Num) for a in node.args):
            v = node.ev(0.0, 0.0)
            if np.isfinite(v):
                return Num(float(v))
    return node


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[+\-*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if not m or m.end() == pos:
            if source[pos:].strip() == "":
                break
            raise ExprError("unexpected character", pos=pos, source=source)
        if m.lastgroup is None and m.group().strip() == "":
            pos = m.end()
            continue
        kind = m.lastgroup
        text = m.group(kind) if kind else ""
        if kind:
            tokens.append((kind, text, m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, text=None):
        tok = self.tokens[self.i]
        if kind and tok[0] != kind or text and tok[1] != text:
            raise ExprError(
                f"expected {text or kind}, found {tok[1] or 'end of input'}",
                pos=tok[2],
                source=self.source,
            )
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ExprError(f"unexpected {tok[1]!r}", pos=tok[2], source=self.source)
        return node

    def expr(self) -> Node:
        # unary minus on the leading term
        if self.peek()[1] == "-":
            self.take()
            node = simplify(Bin("-", Num(0.0), self.term()))
        elif self.peek()[1] == "+":
            self.take()
            node = self.term()
        else:
            node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = simplify(Bin(op, node, self.term()))
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = simplify(Bin(op, node, self.factor()))
        return node

    def factor(self) -> Node:
        node = self.base()
        if self.peek()[1] in ("^", "**"):
            self.take()
            sign = 1
            if self.peek()[1] == "-":
                self.take()
                sign = -1
            tok = self.take("num")
            try:
                n = int(tok[1])
            except ValueError:
                raise ExprError("exponent must be an integer", pos=tok[2], source=self.source) from None
            if sign < 0:
                node = simplify(Bin("/", Num(1.0), Pow(node, n)))
            else:
                node = simplify(Pow(node, n))
        return node

    def base(self) -> Node:
        kind, text, pos = self.peek()
        if kind == "num":
            self.take()
            return Num(float(text))
        if kind == "name":
            self.take()
            if text == "x" or text == "y":
                return Var(text)
            if text == "pi":
                return Num(np.pi)
            if self.peek()[1] == "(":
                if text not in _FUNC_ARITY:
                    raise ExprError(f"unknown function {text!r}", pos=pos, source=self.source)
                self.take(text="(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.take(text=")")
                if len(args) != _FUNC_ARITY[text]:
                    raise ExprError(
                        f"{text} takes {_FUNC_ARITY[text]} argument(s), got {len(args)}",
                        pos=pos,
                        source=self.source,
                    )
                return simplify(Call(text, tuple(args)))
            raise ExprError(f"unknown identifier {text!r}", pos=pos, source=self.source)
        if text == "(":
            self.take()
            node = self.expr()
            self.take(text=")")
            return node
        raise ExprError(f"unexpected {text or 'end of input'!r}", pos=pos, source=self.source)


def parse_field(source: str) -> Node:
    """Parse expression text into a tree with symbolic differentiation."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# compiled evaluation
# ---------------------------------------------------------------------------

_EMIT_NAMESPACE = {
    "np": np,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "_min": np.minimum,
    "_max": np.maximum,
    "bump": _bump,
    "bumpd": _bump_d,
    "perdiff": _perdiff,
}


def _emit_py(node: Node) -> str:
    if isinstance(node, Num):
        return f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Bin):
        return f"({_emit_py(node.a)} {node.op} {_emit_py(node.b)})"
    if isinstance(node, Pow):
        return f"({_emit_py(node.base)} ** {node.n})"
    if isinstance(node, Where):
        return (
            f"np.where({_emit_py(node.a)} <= {_emit_py(node.b)}, "
            f"{_emit_py(node.then)}, {_emit_py(node.other)})"
        )
    if isinstance(node, _BumpD):
        return f"bumpd({_emit_py(node.arg)})"
    if isinstance(node, _BumpD2):
        s = _emit_py(node.arg)
        return (
            f"(lambda _s: np.where(_s > 0, np.exp(-1.0/np.where(_s > 0, _s, 1.0))"
            f" * (1.0 - 2.0*np.where(_s > 0, _s, 1.0)) / np.where(_s > 0, _s, 1.0)**4, 0.0))({s})"
        )
    if isinstance(node, Call):
        f = node.func
        args = [_emit_py(a) for a in node.args]
        if f == "min":
            return f"_min({args[0]}, {args[1]})"
        if f == "max":
            return f"_max({args[0]}, {args[1]})"
        if f == "persq":
            return (
                f"(perdiff({args[0]}, {args[2]})**2 + perdiff({args[1]}, {args[3]})**2)"
            )
        return f"{f}({', '.join(args)})"
    raise ExprError(f"cannot emit {type(node).__name__}")


_COMPILE_CACHE: dict = {}


def compile_expr(node: Node):
    """Compile a tree into a vectorized callable f(x, y)."""
    key = id(node)
    hit = _COMPILE_CACHE.get(key)
    if hit is not None and hit[0] is node:
        return hit[1]
    src = f"lambda x, y: np.asarray({_emit_py(node)}, dtype=float) + 0.0*x"
    fn = eval(src, dict(_EMIT_NAMESPACE))  # noqa: S307 - controlled codegen
    _COMPILE_CACHE[key] = (node, fn)
    return fn


def evaluate(node: Node, x, y):
    """Evaluate on numpy arrays (broadcasting); NaN/inf raise ExprError."""
    out = compile_expr(node)(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if not np.all(np.isfinite(out)):
        raise ExprError(f"expression {node.emit()!r} is not finite on the sample set")
    return out


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------

_KINK_FUNCS = {"abs", "min", "max"}


def has_kinks(node: Node) -> bool:
    """True if the tree contains abs/min/max (at most C^{1,1} regularity)."""
    if isinstance(node, Call) and node.func in _KINK_FUNCS:
        return True
    if isinstance(node, Where):
        return True
    return any(has_kinks(c) for c in node.children())


def check_periodicity(node: Node, tol: float = 1e-9, samples: int = 257,
                      with_derivatives: bool = True) -> None:
    """Verify values (and first derivatives) match across both seams."""
    t = (np.arange(samples) + 0.31830988618) / samples
    zeros = np.zeros_like(t)
    ones = np.ones_like(t)
    trees = [node]
    if with_derivatives:
        trees += [node.d("x"), node.d("y")]
    for tree in trees:
        fn = compile_expr(tree)
        for lhs, rhs, what in (
            ((zeros, t), (ones, t), "x seam"),
            ((t, zeros), (t, ones), "y seam"),
        ):
            a = fn(*lhs)
            b = fn(*rhs)
            gap = float(np.max(np.abs(a - b)))
            if not np.isfinite(gap) or gap > tol:
                raise ExprError(
                    f"expression {node.emit()!r} fails the periodicity check on the "
                    f"{what} (max gap {gap:.3e} > {tol:g})"
                )
