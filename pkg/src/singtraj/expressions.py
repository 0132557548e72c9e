"""Scalar expression trees in state variables x1..xn (and time t).

Expressions are immutable ASTs built from constants, variables, the four
arithmetic operators, integer powers, and a fixed set of elementary
functions.  Differentiation is symbolic and exact at any order, which is
what iterated Lie brackets require; derivative trees are cached per
(node, variable) pair.  Only light simplification is performed (constant
folding, 0*e -> 0, e+0 -> e, e^1 -> e) so trees stay small without a CAS.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

_FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "atan")

_NP_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "atan": np.arctan,
}

# rendered names inside generated code
_PY_FUNCS = {
    "sin": "np.sin",
    "cos": "np.cos",
    "tan": "np.tan",
    "exp": "np.exp",
    "log": "np.log",
    "sqrt": "np.sqrt",
    "atan": "np.arctan",
}


class ExpressionSyntaxError(ValueError):
    """Raised on malformed input; carries the offending position."""

    def __init__(self, message: str, source: str, position: int):
        self.source = source
        self.position = position
        super().__init__(f"{message} (at position {position}: {source!r})")


class ExpressionDomainError(ArithmeticError):
    """Raised when evaluation leaves the domain (log of nonpositive, etc.)."""

    def __init__(self, message: str, subexpression: "Expr"):
        self.subexpression = subexpression
        super().__init__(f"{message} in subexpression '{subexpression}'")


class Expr:
    """One node of an expression tree.

    kind is one of "const", "var", "time", "add", "sub", "mul", "div",
    "pow", "call".  Nodes are immutable after construction; the derivative
    cache is the only mutable slot and is guarded by a lock so concurrent
    evaluations behave as if serialized.
    """

    __slots__ = ("kind", "value", "index", "fn", "a", "b", "power", "_dcache")

    def __init__(self, kind, value=None, index=None, fn=None, a=None, b=None, power=None):
        self.kind = kind
        self.value = value
        self.index = index
        self.fn = fn
        self.a = a
        self.b = b
        self.power = power
        self._dcache = None

    def __str__(self) -> str:
        return to_source(self)

    def __repr__(self) -> str:
        return f"Expr({to_source(self)!r})"

    def diff(self, i: int) -> "Expr":
        return differentiate(self, i)

    def __call__(self, x, t=0.0):
        return evaluate(self, x, t)


_DCACHE_LOCK = threading.Lock()


def const(v: float) -> Expr:
    return Expr("const", value=float(v))


def var(i: int) -> Expr:
    if i < 1:
        raise ValueError(f"variable index must be >= 1, got {i}")
    return Expr("var", index=int(i))


def time_var() -> Expr:
    return Expr("time")


ZERO = const(0.0)
ONE = const(1.0)


def _is_const(e: Expr, v=None) -> bool:
    return e.kind == "const" and (v is None or e.value == v)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Expr("add", a=a, b=b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    return Expr("sub", a=a, b=b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Expr("mul", a=a, b=b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return const(a.value / b.value)
    return Expr("div", a=a, b=b)


def ipow(a: Expr, k: int) -> Expr:
    k = int(k)
    if k == 0:
        return ONE
    if k == 1:
        return a
    if _is_const(a):
        return const(a.value**k)
    return Expr("pow", a=a, power=k)


def call(fn: str, a: Expr) -> Expr:
    if fn not in _FUNCTIONS:
        raise ValueError(f"unknown function {fn!r}")
    if _is_const(a):
        return const(float(_NP_FUNCS[fn](a.value)))
    return Expr("call", fn=fn, a=a)


def neg(a: Expr) -> Expr:
    return sub(ZERO, a)


# ---------------------------------------------------------------------------
# parsing


class _Tokenizer:
    def __init__(self, source: str):
        self.source = source
        self.pos = 0

    def error(self, message: str, pos=None) -> ExpressionSyntaxError:
        return ExpressionSyntaxError(message, self.source, self.pos if pos is None else pos)

    def peek(self):
        s, i = self.source, self.pos
        while i < len(s) and s[i].isspace():
            i += 1
        if i >= len(s):
            return ("eof", "", i)
        c = s[i]
        if c in "+-*/^()":
            return (c, c, i)
        if c.isdigit() or c == ".":
            j = i
            while j < len(s) and s[j].isdigit():
                j += 1
            if j < len(s) and s[j] == ".":
                j += 1
                while j < len(s) and s[j].isdigit():
                    j += 1
            if j == i or s[i:j] == ".":
                raise self.error("malformed number", i)
            if j < len(s) and s[j] in "eE":
                k = j + 1
                if k < len(s) and s[k] in "+-":
                    k += 1
                if k >= len(s) or not s[k].isdigit():
                    raise self.error("malformed exponent", j)
                while k < len(s) and s[k].isdigit():
                    k += 1
                j = k
            return ("number", s[i:j], i)
        if c.isalpha():
            j = i
            while j < len(s) and (s[j].isalnum() or s[j] == "_"):
                j += 1
            return ("ident", s[i:j], i)
        raise self.error(f"unexpected character {c!r}", i)

    def next(self):
        tok = self.peek()
        self.pos = tok[2] + len(tok[1])
        return tok


def parse_expression(source: str, n: int, allow_time: bool = True) -> Expr:
    """Parse `source` into an Expr over variables x1..xn (and t).

    Grammar (whitespace insignificant)::

        expr   := ["-"] term (("+"|"-") term)*
        term   := factor (("*"|"/") factor)*
        factor := base ("^" integer)?
        base   := number | ident | "(" expr ")" | func "(" expr ")"
        func   := sin|cos|tan|exp|log|sqrt|atan
        ident  := "x" integer | "t"

    Raises ExpressionSyntaxError with the offending position on invalid
    input, and rejects variable indices outside [1, n].
    """
    tz = _Tokenizer(source)
    e = _parse_expr(tz, n, allow_time)
    kind, text, pos = tz.peek()
    if kind != "eof":
        raise tz.error(f"unexpected trailing input {text!r}", pos)
    return e


def _parse_expr(tz: _Tokenizer, n: int, allow_time: bool) -> Expr:
    kind, _, _ = tz.peek()
    negate = False
    if kind == "-":
        tz.next()
        negate = True
    e = _parse_term(tz, n, allow_time)
    if negate:
        e = neg(e)
    while True:
        kind, _, _ = tz.peek()
        if kind == "+":
            tz.next()
            e = add(e, _parse_term(tz, n, allow_time))
        elif kind == "-":
            tz.next()
            e = sub(e, _parse_term(tz, n, allow_time))
        else:
            return e


def _parse_term(tz: _Tokenizer, n: int, allow_time: bool) -> Expr:
    e = _parse_factor(tz, n, allow_time)
    while True:
        kind, _, _ = tz.peek()
        if kind == "*":
            tz.next()
            e = mul(e, _parse_factor(tz, n, allow_time))
        elif kind == "/":
            e_pos = tz.peek()[2]
            tz.next()
            rhs = _parse_factor(tz, n, allow_time)
            if _is_const(rhs, 0.0):
                raise tz.error("division by constant zero", e_pos)
            e = div(e, rhs)
        else:
            return e


def _parse_factor(tz: _Tokenizer, n: int, allow_time: bool) -> Expr:
    e = _parse_base(tz, n, allow_time)
    kind, _, _ = tz.peek()
    if kind == "^":
        tz.next()
        kind, text, pos = tz.next()
        sign = 1
        if kind == "-":
            sign = -1
            kind, text, pos = tz.next()
        if kind != "number" or any(c in text for c in ".eE"):
            raise ExpressionSyntaxError("exponent must be an integer", tz.source, pos)
        e = ipow(e, sign * int(text))
    return e


def _parse_base(tz: _Tokenizer, n: int, allow_time: bool) -> Expr:
    kind, text, pos = tz.next()
    if kind == "number":
        return const(float(text))
    if kind == "(":
        e = _parse_expr(tz, n, allow_time)
        kind, _, pos2 = tz.next()
        if kind != ")":
            raise ExpressionSyntaxError("expected ')'", tz.source, pos2)
        return e
    if kind == "ident":
        if text in _FUNCTIONS:
            kind2, _, pos2 = tz.next()
            if kind2 != "(":
                raise ExpressionSyntaxError(f"expected '(' after {text!r}", tz.source, pos2)
            arg = _parse_expr(tz, n, allow_time)
            kind2, _, pos2 = tz.next()
            if kind2 != ")":
                raise ExpressionSyntaxError("expected ')'", tz.source, pos2)
            return call(text, arg)
        if text == "t":
            if not allow_time:
                raise ExpressionSyntaxError("time variable 't' not allowed here", tz.source, pos)
            return time_var()
        if text.startswith("x") and text[1:].isdigit():
            i = int(text[1:])
            if not 1 <= i <= n:
                raise ExpressionSyntaxError(
                    f"variable index {i} out of range [1, {n}]", tz.source, pos
                )
            return var(i)
        raise ExpressionSyntaxError(f"unknown identifier {text!r}", tz.source, pos)
    raise ExpressionSyntaxError(f"unexpected token {text!r}", tz.source, pos)


# ---------------------------------------------------------------------------
# printing

_LEVEL = {"add": 1, "sub": 1, "mul": 2, "div": 2, "pow": 3}


def to_source(e: Expr) -> str:
    """Render to a string that reparses to an evaluation-equivalent tree."""
    return _render(e, 0)


def _render(e: Expr, parent_level: int) -> str:
    if e.kind == "const":
        v = e.value
        s = repr(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(v)
        if v < 0:
            s = f"(0 - {repr(-int(v)) if float(v).is_integer() else repr(-v)})"
        return s
    if e.kind == "var":
        return f"x{e.index}"
    if e.kind == "time":
        return "t"
    if e.kind == "call":
        return f"{e.fn}({_render(e.a, 0)})"
    if e.kind == "pow":
        base = _render(e.a, 4)
        return f"{base}^{e.power}" if e.power >= 0 else f"{base}^({e.power})"
    op = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.kind]
    level = _LEVEL[e.kind]
    left = _render(e.a, level if e.kind in ("add", "mul") else level)
    # right operand of - and / needs the next tighter level to keep associativity
    right = _render(e.b, level + (1 if e.kind in ("sub", "div") else 0))
    s = f"{left} {op} {right}"
    if level < parent_level:
        s = f"({s})"
    return s


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, x: Sequence, t=0.0):
    """Evaluate at x = (x1..xn); components may be floats or numpy arrays.

    Scalar evaluation raises ExpressionDomainError on domain violations;
    array evaluation propagates nan/inf and leaves checking to the caller.
    """
    k = e.kind
    if k == "const":
        return e.value
    if k == "var":
        return x[e.index - 1]
    if k == "time":
        return t
    if k == "call":
        a = evaluate(e.a, x, t)
        scalar = not isinstance(a, np.ndarray)
        if scalar:
            if e.fn == "log" and a <= 0.0:
                raise ExpressionDomainError(f"log of non-positive value {a}", e)
            if e.fn == "sqrt" and a < 0.0:
                raise ExpressionDomainError(f"sqrt of negative value {a}", e)
        return float(_NP_FUNCS[e.fn](a)) if scalar else _NP_FUNCS[e.fn](a)
    if k == "pow":
        a = evaluate(e.a, x, t)
        if e.power < 0 and not isinstance(a, np.ndarray) and a == 0.0:
            raise ExpressionDomainError("zero raised to negative power", e)
        return a**e.power
    a = evaluate(e.a, x, t)
    b = evaluate(e.b, x, t)
    if k == "add":
        return a + b
    if k == "sub":
        return a - b
    if k == "mul":
        return a * b
    if not isinstance(b, np.ndarray) and b == 0.0:
        raise ExpressionDomainError("division by zero", e)
    return a / b


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, i: int) -> Expr:
    """Exact partial derivative with respect to x_i (i in 1..n), cached."""
    cache = e._dcache
    if cache is not None:
        d = cache.get(i)
        if d is not None:
            return d
    d = _diff(e, i)
    with _DCACHE_LOCK:
        if e._dcache is None:
            e._dcache = {}
        e._dcache[i] = d
    return d


def _diff(e: Expr, i: int) -> Expr:
    k = e.kind
    if k in ("const", "time"):
        return ZERO
    if k == "var":
        return ONE if e.index == i else ZERO
    if k == "add":
        return add(differentiate(e.a, i), differentiate(e.b, i))
    if k == "sub":
        return sub(differentiate(e.a, i), differentiate(e.b, i))
    if k == "mul":
        return add(mul(differentiate(e.a, i), e.b), mul(e.a, differentiate(e.b, i)))
    if k == "div":
        num = sub(mul(differentiate(e.a, i), e.b), mul(e.a, differentiate(e.b, i)))
        return div(num, ipow(e.b, 2))
    if k == "pow":
        da = differentiate(e.a, i)
        return mul(mul(const(e.power), ipow(e.a, e.power - 1)), da)
    # call
    da = differentiate(e.a, i)
    a = e.a
    if e.fn == "sin":
        outer = call("cos", a)
    elif e.fn == "cos":
        outer = neg(call("sin", a))
    elif e.fn == "tan":
        outer = div(ONE, ipow(call("cos", a), 2))
    elif e.fn == "exp":
        outer = call("exp", a)
    elif e.fn == "log":
        outer = div(ONE, a)
    elif e.fn == "sqrt":
        outer = div(const(0.5), call("sqrt", a))
    else:  # atan
        outer = div(ONE, add(ONE, ipow(a, 2)))
    return mul(outer, da)


class Jet:
    """Value plus all partial derivatives up to a given order at a point.

    Partials are keyed by sorted tuples of variable indices, so the mixed
    partial d2/dx1 dx2 is jet.partial((1, 2)).
    """

    def __init__(self, value: float, partials: dict):
        self.value = value
        self.partials = partials

    def partial(self, indices) -> float:
        key = tuple(sorted(indices))
        if not key:
            return self.value
        return self.partials[key]


def eval_jet(e: Expr, x: Sequence[float], order: int, t: float = 0.0) -> Jet:
    """Evaluate `e` and all partial derivatives up to `order` at x."""
    if order < 0:
        raise ValueError("order must be >= 0")
    n = len(x)
    value = evaluate(e, x, t)
    partials = {}
    for k in range(1, order + 1):
        for key in itertools.combinations_with_replacement(range(1, n + 1), k):
            d = e
            for i in key:
                d = differentiate(d, i)
            partials[key] = evaluate(d, x, t)
    return Jet(value, partials)


# ---------------------------------------------------------------------------
# compilation (fast repeated numeric evaluation)


def compile_vector(exprs: Sequence[Expr], n: int) -> Callable:
    """Compile expressions into one function f(x, t=0.0) -> ndarray.

    The generated code assigns each distinct subtree to a local once, so
    shared structure in derivative trees does not blow up the source.
    Intended for hot loops (integrators, grid sweeps); semantics match
    `evaluate` except that domain errors surface as numpy warnings/nans.
    """
    names: dict[int, str] = {}
    lines: list[str] = []

    def render(e: Expr) -> str:
        key = id(e)
        got = names.get(key)
        if got is not None:
            return got
        k = e.kind
        if k == "const":
            expr_s = repr(e.value)
        elif k == "var":
            expr_s = f"x[{e.index - 1}]"
        elif k == "time":
            expr_s = "t"
        elif k == "call":
            expr_s = f"{_PY_FUNCS[e.fn]}({render(e.a)})"
        elif k == "pow":
            expr_s = f"{render(e.a)}**({e.power})"
        else:
            op = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[k]
            expr_s = f"({render(e.a)} {op} {render(e.b)})"
        name = f"v{len(names)}"
        names[key] = name
        lines.append(f"    {name} = {expr_s}")
        return name

    outs = [render(e) for e in exprs]
    src = "def _compiled(x, t=0.0):\n"
    src += "\n".join(lines) if lines else "    pass"
    src += f"\n    return np.array([{', '.join(outs)}], dtype=float)\n"
    scope = {"np": np}
    exec(src, scope)  # noqa: S102 - code is generated from our own AST only
    fn = scope["_compiled"]
    fn.n_inputs = n
    fn.source = src
    return fn


def compile_scalar(e: Expr, n: int) -> Callable:
    """Compile a single expression to f(x, t=0.0) -> float (or array)."""
    vec = compile_vector([e], n)

    def fn(x, t=0.0):
        return vec(x, t)[0]

    fn.source = vec.source
    return fn
