"""Symbolic expressions over real-valued state vectors.

Expression trees are immutable and may share subtrees, so composite
expressions (for example a network unrolled into closed form) stay compact
as DAGs.  The module provides exact point evaluation, vectorised batch
evaluation, symbolic differentiation, Lie derivatives along vector fields,
light algebraic simplification, a text grammar with parser and printer, and
interval evaluation with outward rounding so that every enclosure is a
guaranteed superset of the true image.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "PowInt",
    "Sin",
    "Cos",
    "Exp",
    "Tanh",
    "Interval",
    "Box",
    "ParseError",
    "EvalError",
    "EnclosureError",
    "parse_expr",
    "print_expr",
    "eval_point",
    "eval_batch",
    "eval_interval",
    "differentiate",
    "lie_derivative",
    "simplify",
    "free_variables",
    "polynomial_degree",
    "CompiledExprs",
]


class ParseError(ValueError):
    """Raised when expression text does not match the grammar."""


class EvalError(ArithmeticError):
    """Raised by exact evaluation on an undefined operation."""


class EnclosureError(ArithmeticError):
    """Raised by interval evaluation when no finite enclosure exists."""


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------


class Expr:
    """Base class for immutable expression nodes."""

    __slots__ = ()

    def __add__(self, other: "Expr | float") -> "Expr":
        return Add(self, _as_expr(other))

    def __radd__(self, other: "Expr | float") -> "Expr":
        return Add(_as_expr(other), self)

    def __sub__(self, other: "Expr | float") -> "Expr":
        return Sub(self, _as_expr(other))

    def __rsub__(self, other: "Expr | float") -> "Expr":
        return Sub(_as_expr(other), self)

    def __mul__(self, other: "Expr | float") -> "Expr":
        return Mul(self, _as_expr(other))

    def __rmul__(self, other: "Expr | float") -> "Expr":
        return Mul(_as_expr(other), self)

    def __truediv__(self, other: "Expr | float") -> "Expr":
        return Div(self, _as_expr(other))

    def __rtruediv__(self, other: "Expr | float") -> "Expr":
        return Div(_as_expr(other), self)

    def __neg__(self) -> "Expr":
        return Neg(self)

    def __pow__(self, k: int) -> "Expr":
        return PowInt(self, k)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"<{type(self).__name__} {print_expr(self)}>"


def _as_expr(v: "Expr | float | int") -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float)):
        return Const(float(v))
    raise TypeError(f"cannot interpret {v!r} as an expression")


class Const(Expr):
    """A floating-point literal."""

    __slots__ = ("value",)

    def __init__(self, value: float):
        object.__setattr__(self, "value", float(value))

    def __setattr__(self, *a):  # guard against accidental mutation
        raise AttributeError("Const is immutable")


class Var(Expr):
    """A state variable identified by its coordinate index."""

    __slots__ = ("index",)

    def __init__(self, index: int):
        if index < 0:
            raise ValueError("variable index must be nonnegative")
        object.__setattr__(self, "index", int(index))

    def __setattr__(self, *a):
        raise AttributeError("Var is immutable")


class _Unary(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        object.__setattr__(self, "arg", _as_expr(arg))

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")


class _Binary(Expr):
    __slots__ = ("left", "right")

    def __init__(self, left: Expr, right: Expr):
        object.__setattr__(self, "left", _as_expr(left))
        object.__setattr__(self, "right", _as_expr(right))

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")


class Neg(_Unary):
    """Unary minus."""


class Add(_Binary):
    """Sum of two expressions."""


class Sub(_Binary):
    """Difference of two expressions."""


class Mul(_Binary):
    """Product of two expressions."""


class Div(_Binary):
    """Quotient of two expressions.  Undefined when the divisor is zero."""


class PowInt(Expr):
    """A nonnegative integer power of a base expression."""

    __slots__ = ("base", "power")

    def __init__(self, base: Expr, power: int):
        if not isinstance(power, int) or isinstance(power, bool) or power < 0:
            raise ValueError("PowInt exponent must be a nonnegative integer")
        object.__setattr__(self, "base", _as_expr(base))
        object.__setattr__(self, "power", power)

    def __setattr__(self, *a):
        raise AttributeError("PowInt is immutable")


class Sin(_Unary):
    """Sine."""


class Cos(_Unary):
    """Cosine."""


class Exp(_Unary):
    """Natural exponential."""


class Tanh(_Unary):
    """Hyperbolic tangent."""


def free_variables(e: Expr) -> set[int]:
    """Return the set of variable indices appearing in ``e``."""
    seen: set[int] = set()
    out: set[int] = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if isinstance(n, Var):
            out.add(n.index)
        else:
            stack.extend(_children(n))
    return out


def _children(n: Expr) -> tuple[Expr, ...]:
    if isinstance(n, (Const, Var)):
        return ()
    if isinstance(n, _Unary):
        return (n.arg,)
    if isinstance(n, _Binary):
        return (n.left, n.right)
    if isinstance(n, PowInt):
        return (n.base,)
    raise TypeError(f"unknown node {type(n).__name__}")


# ---------------------------------------------------------------------------
# Intervals and boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Interval:
    """A closed interval [lo, hi] of reals."""

    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise ValueError("interval bounds must not be NaN")
        if self.lo > self.hi:
            raise ValueError(f"empty interval: [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        m = 0.5 * (self.lo + self.hi)
        if not math.isfinite(m):
            m = 0.5 * self.lo + 0.5 * self.hi
        return m

    def contains(self, v: float) -> bool:
        return self.lo <= v <= self.hi


@dataclass(frozen=True)
class Box:
    """An axis-aligned product of intervals."""

    intervals: tuple[Interval, ...]

    @classmethod
    def from_bounds(cls, bounds: Iterable[Sequence[float]]) -> "Box":
        return cls(tuple(Interval(float(lo), float(hi)) for lo, hi in bounds))

    @property
    def dim(self) -> int:
        return len(self.intervals)

    def midpoint(self) -> np.ndarray:
        return np.array([iv.mid for iv in self.intervals])

    def widest_dim(self) -> int:
        widths = [iv.width for iv in self.intervals]
        return int(np.argmax(widths))

    def max_width(self) -> float:
        return max(iv.width for iv in self.intervals)

    def split(self, dim: int) -> tuple["Box", "Box"]:
        iv = self.intervals[dim]
        m = iv.mid
        lower = self.intervals[:dim] + (Interval(iv.lo, m),) + self.intervals[dim + 1 :]
        upper = self.intervals[:dim] + (Interval(m, iv.hi),) + self.intervals[dim + 1 :]
        return Box(lower), Box(upper)

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([iv.lo for iv in self.intervals])
        hi = np.array([iv.hi for iv in self.intervals])
        return lo, hi

    def contains(self, x: Sequence[float]) -> bool:
        return all(iv.contains(float(v)) for iv, v in zip(self.intervals, x))


# ---------------------------------------------------------------------------
# Exact evaluation
# ---------------------------------------------------------------------------


def eval_point(e: Expr, x: Sequence[float]) -> float:
    """Evaluate ``e`` exactly at the point ``x``.

    Raises EvalError on division by zero, naming the offending subtree.
    """
    memo: dict[int, float] = {}

    def rec(n: Expr) -> float:
        key = id(n)
        if key in memo:
            return memo[key]
        if isinstance(n, Const):
            v = n.value
        elif isinstance(n, Var):
            if n.index >= len(x):
                raise EvalError(f"point has {len(x)} coordinates, expression uses x{n.index}")
            v = float(x[n.index])
        elif isinstance(n, Neg):
            v = -rec(n.arg)
        elif isinstance(n, Add):
            v = rec(n.left) + rec(n.right)
        elif isinstance(n, Sub):
            v = rec(n.left) - rec(n.right)
        elif isinstance(n, Mul):
            v = rec(n.left) * rec(n.right)
        elif isinstance(n, Div):
            den = rec(n.right)
            if den == 0.0:
                raise EvalError(f"division by zero in {print_expr(n)}")
            v = rec(n.left) / den
        elif isinstance(n, PowInt):
            v = rec(n.base) ** n.power
        elif isinstance(n, Sin):
            v = math.sin(rec(n.arg))
        elif isinstance(n, Cos):
            v = math.cos(rec(n.arg))
        elif isinstance(n, Exp):
            a = rec(n.arg)
            v = math.exp(a) if a < 709.0 else math.inf
        elif isinstance(n, Tanh):
            v = math.tanh(rec(n.arg))
        else:
            raise TypeError(f"unknown node {type(n).__name__}")
        memo[key] = v
        return v

    return rec(e)


def eval_batch(e: Expr, X: np.ndarray) -> np.ndarray:
    """Evaluate ``e`` over a batch of points, IEEE semantics (inf/nan propagate)."""
    return CompiledExprs([e]).eval_points(np.asarray(X, dtype=float))[0]


# ---------------------------------------------------------------------------
# Interval arithmetic kernels
#
# Every kernel returns bounds widened outward by one ulp (two for library
# transcendentals, whose rounding is not guaranteed correct), so enclosures
# remain supersets of the true image under floating point rounding.
# NaN bounds can only arise from invalid upstream values; consumers must
# treat them conservatively (comparisons with NaN are false, so they never
# justify pruning).
# ---------------------------------------------------------------------------

_TWO_PI = 2.0 * math.pi
_HALF_PI = 0.5 * math.pi
# absolute slack for deciding whether a trig extremum lies inside an interval;
# false positives only widen the enclosure and stay sound
_TRIG_SLACK = 1e-9


def _down(a):
    return np.nextafter(a, -math.inf)


def _up(a):
    return np.nextafter(a, math.inf)


def _down2(a):
    return np.nextafter(np.nextafter(a, -math.inf), -math.inf)


def _up2(a):
    return np.nextafter(np.nextafter(a, math.inf), math.inf)


def _iv_add(l1, h1, l2, h2):
    return _down(l1 + l2), _up(h1 + h2)


def _iv_sub(l1, h1, l2, h2):
    return _down(l1 - h2), _up(h1 - l2)


def _iv_neg(l, h):
    return -h, -l


def _iv_mul(l1, h1, l2, h2):
    p1 = l1 * l2
    p2 = l1 * h2
    p3 = h1 * l2
    p4 = h1 * h2
    # fmin/fmax skip NaNs from 0 * inf; all-NaN stays NaN and is handled
    # conservatively downstream
    lo = np.fmin(np.fmin(p1, p2), np.fmin(p3, p4))
    hi = np.fmax(np.fmax(p1, p2), np.fmax(p3, p4))
    return _down(lo), _up(hi)


def _iv_div(l1, h1, l2, h2):
    """Quotient bounds plus a mask of inputs whose divisor straddles zero."""
    bad = (l2 <= 0.0) & (h2 >= 0.0)
    safe_l2 = np.where(bad, 1.0, l2)
    safe_h2 = np.where(bad, 1.0, h2)
    with np.errstate(all="ignore"):
        q1 = l1 / safe_l2
        q2 = l1 / safe_h2
        q3 = h1 / safe_l2
        q4 = h1 / safe_h2
    lo = np.fmin(np.fmin(q1, q2), np.fmin(q3, q4))
    hi = np.fmax(np.fmax(q1, q2), np.fmax(q3, q4))
    lo = np.where(bad, np.nan, lo)
    hi = np.where(bad, np.nan, hi)
    return _down(lo), _up(hi), bad


def _iv_powint(l, h, k: int):
    if k == 0:
        return np.ones_like(l), np.ones_like(h)
    if k == 1:
        return l, h
    with np.errstate(all="ignore"):
        if k % 2 == 1:
            return _down2(np.power(l, k)), _up2(np.power(h, k))
        al = np.abs(l)
        ah = np.abs(h)
        m = np.where((l <= 0.0) & (h >= 0.0), 0.0, np.minimum(al, ah))
        big = np.maximum(al, ah)
        lo = np.maximum(0.0, _down2(np.power(m, k)))
        hi = _up2(np.power(big, k))
        return lo, hi


def _iv_sin(l, h):
    with np.errstate(all="ignore"):
        k = np.ceil((l - _HALF_PI) / _TWO_PI - _TRIG_SLACK)
        has_max = _HALF_PI + _TWO_PI * k <= h + _TRIG_SLACK
        k = np.ceil((l + _HALF_PI) / _TWO_PI - _TRIG_SLACK)
        has_min = -_HALF_PI + _TWO_PI * k <= h + _TRIG_SLACK
        sl = np.sin(l)
        sh = np.sin(h)
    lo = np.where(has_min, -1.0, np.maximum(-1.0, _down2(np.minimum(sl, sh))))
    hi = np.where(has_max, 1.0, np.minimum(1.0, _up2(np.maximum(sl, sh))))
    return lo, hi


def _iv_cos(l, h):
    with np.errstate(all="ignore"):
        k = np.ceil(l / _TWO_PI - _TRIG_SLACK)
        has_max = _TWO_PI * k <= h + _TRIG_SLACK
        k = np.ceil((l - math.pi) / _TWO_PI - _TRIG_SLACK)
        has_min = math.pi + _TWO_PI * k <= h + _TRIG_SLACK
        cl = np.cos(l)
        ch = np.cos(h)
    lo = np.where(has_min, -1.0, np.maximum(-1.0, _down2(np.minimum(cl, ch))))
    hi = np.where(has_max, 1.0, np.minimum(1.0, _up2(np.maximum(cl, ch))))
    return lo, hi


def _iv_exp(l, h):
    with np.errstate(all="ignore"):
        lo = np.maximum(0.0, _down2(np.exp(l)))
        hi = _up2(np.exp(h))
    return lo, hi


def _iv_tanh(l, h):
    lo = np.maximum(-1.0, _down2(np.tanh(l)))
    hi = np.minimum(1.0, _up2(np.tanh(h)))
    return lo, hi


# ---------------------------------------------------------------------------
# Compiled evaluation over shared DAGs
# ---------------------------------------------------------------------------


class CompiledExprs:
    """Several expressions compiled to one instruction tape.

    Shared subtrees (by object identity) are evaluated once.  The tape runs
    either exactly over a batch of points or as interval arithmetic over a
    batch of boxes.
    """

    def __init__(self, exprs: Sequence[Expr]):
        self._instrs: list[tuple] = []
        slot_of: dict[int, int] = {}

        def visit(root: Expr) -> int:
            # iterative postorder so deep derivative DAGs cannot overflow
            # the recursion limit
            stack: list[tuple[Expr, bool]] = [(root, False)]
            while stack:
                n, ready = stack.pop()
                if id(n) in slot_of:
                    continue
                if not ready:
                    stack.append((n, True))
                    for c in _children(n):
                        if id(c) not in slot_of:
                            stack.append((c, False))
                    continue
                args = tuple(slot_of[id(c)] for c in _children(n))
                slot = len(self._instrs)
                if isinstance(n, Const):
                    self._instrs.append(("const", n.value))
                elif isinstance(n, Var):
                    self._instrs.append(("var", n.index))
                elif isinstance(n, PowInt):
                    self._instrs.append(("pow", n.power, args[0]))
                else:
                    tag = type(n).__name__.lower()
                    self._instrs.append((tag, *args))
                slot_of[id(n)] = slot
            return slot_of[id(root)]

        self._roots = [visit(e) for e in exprs]
        self.n_nodes = len(self._instrs)

    def eval_points(self, X: np.ndarray) -> list[np.ndarray]:
        """Evaluate all roots at the rows of ``X`` with IEEE semantics."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        k = X.shape[0]
        slots: list = [None] * self.n_nodes
        with np.errstate(all="ignore"):
            for i, ins in enumerate(self._instrs):
                op = ins[0]
                if op == "const":
                    slots[i] = ins[1]
                elif op == "var":
                    slots[i] = X[:, ins[1]]
                elif op == "neg":
                    slots[i] = -slots[ins[1]]
                elif op == "add":
                    slots[i] = slots[ins[1]] + slots[ins[2]]
                elif op == "sub":
                    slots[i] = slots[ins[1]] - slots[ins[2]]
                elif op == "mul":
                    slots[i] = slots[ins[1]] * slots[ins[2]]
                elif op == "div":
                    slots[i] = slots[ins[1]] / slots[ins[2]]
                elif op == "pow":
                    slots[i] = np.power(slots[ins[2]], ins[1])
                elif op == "sin":
                    slots[i] = np.sin(slots[ins[1]])
                elif op == "cos":
                    slots[i] = np.cos(slots[ins[1]])
                elif op == "exp":
                    slots[i] = np.exp(slots[ins[1]])
                elif op == "tanh":
                    slots[i] = np.tanh(slots[ins[1]])
                else:  # pragma: no cover
                    raise TypeError(f"unknown opcode {op}")
        out = []
        for r in self._roots:
            v = slots[r]
            if not isinstance(v, np.ndarray):
                v = np.full(k, float(v))
            out.append(np.asarray(v, dtype=float))
        return out

    def eval_intervals(
        self, lo: np.ndarray, hi: np.ndarray
    ) -> list[tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]]:
        """Enclose all roots over a batch of boxes.

        ``lo`` and ``hi`` have shape (k, n).  Returns per root a triple
        (lower bounds, upper bounds, failure mask); the mask marks boxes
        where a divisor straddled zero and the bounds are meaningless.
        """
        lo = np.atleast_2d(np.asarray(lo, dtype=float))
        hi = np.atleast_2d(np.asarray(hi, dtype=float))
        k = lo.shape[0]
        los: list = [None] * self.n_nodes
        his: list = [None] * self.n_nodes
        fail: list = [None] * self.n_nodes

        def merge(*masks):
            out = None
            for m in masks:
                if m is None:
                    continue
                out = m if out is None else (out | m)
            return out

        with np.errstate(all="ignore"):
            for i, ins in enumerate(self._instrs):
                op = ins[0]
                if op == "const":
                    los[i] = his[i] = ins[1]
                    continue
                if op == "var":
                    los[i] = lo[:, ins[1]]
                    his[i] = hi[:, ins[1]]
                    continue
                if op in ("add", "sub", "mul", "div"):
                    a, b = ins[1], ins[2]
                    l1, h1, l2, h2 = los[a], his[a], los[b], his[b]
                    if op == "add":
                        los[i], his[i] = _iv_add(l1, h1, l2, h2)
                    elif op == "sub":
                        los[i], his[i] = _iv_sub(l1, h1, l2, h2)
                    elif op == "mul":
                        los[i], his[i] = _iv_mul(l1, h1, l2, h2)
                    else:
                        los[i], his[i], bad = _iv_div(l1, h1, l2, h2)
                        bad = np.broadcast_to(bad, (k,)) if np.ndim(bad) == 0 else bad
                        fail[i] = merge(fail[a], fail[b], bad)
                        continue
                    fail[i] = merge(fail[a], fail[b])
                    continue
                if op == "pow":
                    a = ins[2]
                    los[i], his[i] = _iv_powint(los[a], his[a], ins[1])
                    fail[i] = fail[a]
                    continue
                a = ins[1]
                l1, h1 = los[a], his[a]
                if op == "neg":
                    los[i], his[i] = _iv_neg(l1, h1)
                elif op == "sin":
                    los[i], his[i] = _iv_sin(l1, h1)
                elif op == "cos":
                    los[i], his[i] = _iv_cos(l1, h1)
                elif op == "exp":
                    los[i], his[i] = _iv_exp(l1, h1)
                elif op == "tanh":
                    los[i], his[i] = _iv_tanh(l1, h1)
                else:  # pragma: no cover
                    raise TypeError(f"unknown opcode {op}")
                fail[i] = fail[a]

        out = []
        for r in self._roots:
            lv, hv = los[r], his[r]
            if not isinstance(lv, np.ndarray) or lv.shape != (k,):
                lv = np.broadcast_to(np.asarray(lv, dtype=float), (k,)).copy()
            if not isinstance(hv, np.ndarray) or hv.shape != (k,):
                hv = np.broadcast_to(np.asarray(hv, dtype=float), (k,)).copy()
            out.append((lv, hv, fail[r]))
        return out


def eval_interval(e: Expr, box: Box) -> Interval:
    """Enclose the image of ``e`` over ``box``.

    The result is a sound superset of {e(x) : x in box}.  Raises
    EnclosureError when a divisor interval contains zero.
    """
    lo, hi = box.as_arrays()
    (lv, hv, bad) = CompiledExprs([e]).eval_intervals(lo[None, :], hi[None, :])[0]
    if bad is not None and bool(bad[0]):
        raise EnclosureError("division by an interval containing zero")
    l, h = float(lv[0]), float(hv[0])
    if math.isnan(l) or math.isnan(h):
        raise EnclosureError("enclosure is undefined (NaN bounds)")
    return Interval(l, h)


# ---------------------------------------------------------------------------
# Differentiation and simplification
# ---------------------------------------------------------------------------


def _is_const(e: Expr, v: Optional[float] = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def _sadd(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def _ssub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _sneg(b)
    return Sub(a, b)


def _sneg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _smul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return _sneg(b)
    if _is_const(b, -1.0):
        return _sneg(a)
    return Mul(a, b)


def _sdiv(a: Expr, b: Expr) -> Expr:
    if isinstance(b, Const) and b.value != 0.0 and isinstance(a, Const):
        return Const(a.value / b.value)
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0):
        return Const(0.0)
    return Div(a, b)


def _spow(a: Expr, k: int) -> Expr:
    if k == 0:
        return Const(1.0)
    if k == 1:
        return a
    if isinstance(a, Const):
        return Const(a.value**k)
    return PowInt(a, k)


def differentiate(e: Expr, var: int) -> Expr:
    """Return the partial derivative of ``e`` with respect to variable ``var``.

    Shared subtrees keep shared derivatives, so the result stays a compact
    DAG even for deep compositions.
    """
    memo: dict[int, Expr] = {}

    def d(n: Expr) -> Expr:
        key = id(n)
        if key in memo:
            return memo[key]
        if isinstance(n, Const):
            r: Expr = Const(0.0)
        elif isinstance(n, Var):
            r = Const(1.0) if n.index == var else Const(0.0)
        elif isinstance(n, Neg):
            r = _sneg(d(n.arg))
        elif isinstance(n, Add):
            r = _sadd(d(n.left), d(n.right))
        elif isinstance(n, Sub):
            r = _ssub(d(n.left), d(n.right))
        elif isinstance(n, Mul):
            r = _sadd(_smul(d(n.left), n.right), _smul(n.left, d(n.right)))
        elif isinstance(n, Div):
            num = _ssub(_smul(d(n.left), n.right), _smul(n.left, d(n.right)))
            r = _sdiv(num, _spow(n.right, 2))
        elif isinstance(n, PowInt):
            if n.power == 0:
                r = Const(0.0)
            else:
                r = _smul(_smul(Const(float(n.power)), _spow(n.base, n.power - 1)), d(n.base))
        elif isinstance(n, Sin):
            r = _smul(Cos(n.arg), d(n.arg))
        elif isinstance(n, Cos):
            r = _sneg(_smul(Sin(n.arg), d(n.arg)))
        elif isinstance(n, Exp):
            r = _smul(n, d(n.arg))
        elif isinstance(n, Tanh):
            r = _smul(_ssub(Const(1.0), _spow(n, 2)), d(n.arg))
        else:
            raise TypeError(f"unknown node {type(n).__name__}")
        memo[key] = r
        return r

    return d(e)


def lie_derivative(e: Expr, field: Sequence[Expr]) -> Expr:
    """Return the derivative of ``e`` along the vector field ``field``.

    This is the inner product of the gradient of ``e`` with the field
    components, i.e. the time derivative of ``e`` along system trajectories.
    """
    total: Expr = Const(0.0)
    for i, f_i in enumerate(field):
        total = _sadd(total, _smul(differentiate(e, i), f_i))
    return total


def _flatten_sum(e: Expr, sign: float, terms: list[tuple[Expr, float]], const: list[float]):
    if isinstance(e, Add):
        _flatten_sum(e.left, sign, terms, const)
        _flatten_sum(e.right, sign, terms, const)
    elif isinstance(e, Sub):
        _flatten_sum(e.left, sign, terms, const)
        _flatten_sum(e.right, -sign, terms, const)
    elif isinstance(e, Neg):
        _flatten_sum(e.arg, -sign, terms, const)
    elif isinstance(e, Const):
        const[0] += sign * e.value
    else:
        terms.append((e, sign))


def _flatten_product(e: Expr, factors: list[Expr], const: list[float]):
    if isinstance(e, Mul):
        _flatten_product(e.left, factors, const)
        _flatten_product(e.right, factors, const)
    elif isinstance(e, Neg):
        const[0] = -const[0]
        _flatten_product(e.arg, factors, const)
    elif isinstance(e, Const):
        const[0] *= e.value
    else:
        factors.append(e)


def simplify(e: Expr) -> Expr:
    """Fold constants, drop 0/1 identities and flatten nested sums/products.

    The result agrees with the input pointwise up to floating-point
    reassociation.
    """
    memo: dict[int, Expr] = {}

    def s(n: Expr) -> Expr:
        key = id(n)
        if key in memo:
            return memo[key]
        if isinstance(n, (Const, Var)):
            r: Expr = n
        elif isinstance(n, (Add, Sub)):
            terms: list[tuple[Expr, float]] = []
            const = [0.0]
            _flatten_sum(Add(s(n.left), s(n.right)) if isinstance(n, Add) else Sub(s(n.left), s(n.right)), 1.0, terms, const)
            r = _rebuild_sum(terms, const[0])
        elif isinstance(n, Neg):
            r = _sneg(s(n.arg))
        elif isinstance(n, Mul):
            factors: list[Expr] = []
            const = [1.0]
            _flatten_product(Mul(s(n.left), s(n.right)), factors, const)
            r = _rebuild_product(factors, const[0])
        elif isinstance(n, Div):
            r = _sdiv(s(n.left), s(n.right))
        elif isinstance(n, PowInt):
            r = _spow(s(n.base), n.power)
        elif isinstance(n, Sin):
            a = s(n.arg)
            r = Const(math.sin(a.value)) if isinstance(a, Const) else Sin(a)
        elif isinstance(n, Cos):
            a = s(n.arg)
            r = Const(math.cos(a.value)) if isinstance(a, Const) else Cos(a)
        elif isinstance(n, Exp):
            a = s(n.arg)
            r = Const(math.exp(a.value)) if isinstance(a, Const) and a.value < 709.0 else Exp(a)
        elif isinstance(n, Tanh):
            a = s(n.arg)
            r = Const(math.tanh(a.value)) if isinstance(a, Const) else Tanh(a)
        else:
            raise TypeError(f"unknown node {type(n).__name__}")
        memo[key] = r
        return r

    return s(e)


def _rebuild_sum(terms: list[tuple[Expr, float]], const: float) -> Expr:
    out: Optional[Expr] = None
    for t, sign in terms:
        if out is None:
            out = t if sign > 0 else _sneg(t)
        else:
            out = Add(out, t) if sign > 0 else Sub(out, t)
    if out is None:
        return Const(const)
    if const != 0.0:
        out = Add(out, Const(const)) if const > 0 else Sub(out, Const(-const))
    return out


def _rebuild_product(factors: list[Expr], const: float) -> Expr:
    if const == 0.0:
        return Const(0.0)
    out: Optional[Expr] = None
    for f in factors:
        out = f if out is None else Mul(out, f)
    if out is None:
        return Const(const)
    if const == 1.0:
        return out
    if const == -1.0:
        return Neg(out)
    return Mul(Const(const), out)


def polynomial_degree(e: Expr) -> Optional[int]:
    """Total degree of ``e`` as a polynomial, or None if not polynomial."""
    memo: dict[int, Optional[int]] = {}

    def deg(n: Expr) -> Optional[int]:
        key = id(n)
        if key in memo:
            return memo[key]
        if isinstance(n, Const):
            r: Optional[int] = 0
        elif isinstance(n, Var):
            r = 1
        elif isinstance(n, Neg):
            r = deg(n.arg)
        elif isinstance(n, (Add, Sub)):
            a, b = deg(n.left), deg(n.right)
            r = None if a is None or b is None else max(a, b)
        elif isinstance(n, Mul):
            a, b = deg(n.left), deg(n.right)
            r = None if a is None or b is None else a + b
        elif isinstance(n, Div):
            a, b = deg(n.left), deg(n.right)
            r = a if (a is not None and b == 0) else None
        elif isinstance(n, PowInt):
            a = deg(n.base)
            r = None if a is None else a * n.power
        else:
            r = None
        memo[key] = r
        return r

    return deg(e)


# ---------------------------------------------------------------------------
# Parsing
#
# Grammar:
#   expr   := term (("+" | "-") term)*
#   term   := factor (("*" | "/") factor)*
#   factor := atom ("^" nonneg_int)?
#   atom   := number | ident | "(" expr ")"
#           | ("-" | "sin" | "cos" | "exp" | "tanh") atom
#
# The identifier "e" denotes Euler's number; "e" followed by "^" parses as
# the natural exponential of the following atom, e.g. "e^(-x)".
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\^|\+|-|\*|/|\(|\))"
    r")"
)

_FUNCTIONS = {"sin": Sin, "cos": Cos, "exp": Exp, "tanh": Tanh}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            rest = text[pos:].strip()
            if not rest:
                break
            raise ParseError(f"unexpected character {rest[0]!r} at position {pos}")
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.var_index = {name: i for i, name in enumerate(variables)}

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        t = self.peek()
        if t is None:
            raise ParseError(f"unexpected end of expression: {self.text!r}")
        self.pos += 1
        return t

    def expect_op(self, op: str):
        t = self.next()
        if t[0] != "op" or t[1] != op:
            raise ParseError(f"expected {op!r} at position {t[2]} in {self.text!r}")

    def parse_expr(self) -> Expr:
        left = self.parse_term()
        while True:
            t = self.peek()
            if t is not None and t[0] == "op" and t[1] in "+-":
                self.pos += 1
                right = self.parse_term()
                left = Add(left, right) if t[1] == "+" else Sub(left, right)
            else:
                return left

    def parse_term(self) -> Expr:
        left = self.parse_factor()
        while True:
            t = self.peek()
            if t is not None and t[0] == "op" and t[1] in "*/":
                self.pos += 1
                right = self.parse_factor()
                left = Mul(left, right) if t[1] == "*" else Div(left, right)
            else:
                return left

    def parse_factor(self) -> Expr:
        atom = self.parse_atom()
        t = self.peek()
        if t is not None and t[0] == "op" and t[1] == "^":
            self.pos += 1
            return PowInt(atom, self.parse_exponent())
        return atom

    def parse_exponent(self) -> int:
        t = self.next()
        if t[0] != "num" or not re.fullmatch(r"\d+", t[1]):
            raise ParseError(
                f"exponent must be a nonnegative integer at position {t[2]} in {self.text!r}"
            )
        return int(t[1])

    def parse_atom(self) -> Expr:
        t = self.next()
        kind, value, where = t
        if kind == "num":
            return Const(float(value))
        if kind == "ident":
            if value == "e":
                nxt = self.peek()
                if nxt is not None and nxt[0] == "op" and nxt[1] == "^":
                    self.pos += 1
                    return Exp(self.parse_atom())
                if value in self.var_index:
                    return Var(self.var_index[value])
                return Const(math.e)
            if value in _FUNCTIONS:
                return _FUNCTIONS[value](self.parse_atom())
            if value in self.var_index:
                return Var(self.var_index[value])
            raise ParseError(f"unknown identifier {value!r} at position {where}")
        if kind == "op":
            if value == "(":
                inner = self.parse_expr()
                self.expect_op(")")
                return inner
            if value == "-":
                return Neg(self.parse_atom())
        raise ParseError(f"unexpected token {value!r} at position {where} in {self.text!r}")


def parse_expr(text: str, variables: Sequence[str]) -> Expr:
    """Parse expression text over the given variable names."""
    p = _Parser(text, variables)
    e = p.parse_expr()
    t = p.peek()
    if t is not None:
        raise ParseError(f"trailing input {t[1]!r} at position {t[2]} in {text!r}")
    return e


# ---------------------------------------------------------------------------
# Printing
# ---------------------------------------------------------------------------

_LEVEL_SUM = 0
_LEVEL_TERM = 1
_LEVEL_FACTOR = 2
_LEVEL_ATOM = 3


def print_expr(e: Expr, variables: Optional[Sequence[str]] = None) -> str:
    """Render ``e`` in the expression grammar; parse_expr inverts it."""
    names = list(variables) if variables is not None else None
    memo: dict[tuple[int, int], str] = {}

    def name(i: int) -> str:
        if names is not None:
            if i >= len(names):
                raise ValueError(f"no name for variable index {i}")
            return names[i]
        return f"x{i}"

    def p(n: Expr, level: int) -> str:
        key = (id(n), level)
        if key in memo:
            return memo[key]
        if isinstance(n, Const):
            v = n.value
            if v < 0 or (v == 0 and math.copysign(1.0, v) < 0):
                s = f"(-{_fmt(-v)})" if level >= _LEVEL_ATOM else f"-{_fmt(-v)}"
            else:
                s = _fmt(v)
        elif isinstance(n, Var):
            s = name(n.index)
        elif isinstance(n, Add):
            s = f"{p(n.left, _LEVEL_SUM)} + {p(n.right, _LEVEL_TERM)}"
            s = _wrap(s, level > _LEVEL_SUM)
        elif isinstance(n, Sub):
            s = f"{p(n.left, _LEVEL_SUM)} - {p(n.right, _LEVEL_TERM)}"
            s = _wrap(s, level > _LEVEL_SUM)
        elif isinstance(n, Mul):
            s = f"{p(n.left, _LEVEL_TERM)} * {p(n.right, _LEVEL_FACTOR)}"
            s = _wrap(s, level > _LEVEL_TERM)
        elif isinstance(n, Div):
            s = f"{p(n.left, _LEVEL_TERM)} / {p(n.right, _LEVEL_FACTOR)}"
            s = _wrap(s, level > _LEVEL_TERM)
        elif isinstance(n, Neg):
            s = f"-{p(n.arg, _LEVEL_ATOM)}"
            s = _wrap(s, level > _LEVEL_FACTOR)
        elif isinstance(n, PowInt):
            s = f"{p(n.base, _LEVEL_ATOM)}^{n.power}"
            s = _wrap(s, level > _LEVEL_FACTOR)
        elif isinstance(n, Sin):
            s = f"sin({p(n.arg, _LEVEL_SUM)})"
        elif isinstance(n, Cos):
            s = f"cos({p(n.arg, _LEVEL_SUM)})"
        elif isinstance(n, Exp):
            s = f"exp({p(n.arg, _LEVEL_SUM)})"
        elif isinstance(n, Tanh):
            s = f"tanh({p(n.arg, _LEVEL_SUM)})"
        else:
            raise TypeError(f"unknown node {type(n).__name__}")
        memo[key] = s
        return s

    return p(e, _LEVEL_SUM)


def _wrap(s: str, need: bool) -> str:
    return f"({s})" if need else s


def _fmt(v: float) -> str:
    if v != v or math.isinf(v):
        raise ValueError(f"cannot print non-finite constant {v}")
    s = repr(v)
    # the grammar has no sign in numeric exponents of the caret form, but
    # scientific literals like 1e-06 are ordinary number tokens
    return s
