"""Outward-rounded interval arithmetic over an arbitrary-precision binary backend.

Endpoints are MPFR numbers (via gmpy2); every operation rounds the lower
endpoint toward -inf and the upper endpoint toward +inf, so the result
interval always encloses the exact image of the operands.  Unbounded
endpoints (+-inf) are ordinary values: "no bound exists" is representable,
never an exception.

The backend working precision lives in an explicit :class:`IAContext`;
intervals themselves are immutable dumb data.  The context can be swapped
for another directed-rounding backend without touching callers.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Union

import gmpy2

__all__ = [
    "DEFAULT_PRECISION_BITS",
    "exact_neg",
    "DomainError",
    "Interval",
    "IAContext",
    "ia_binary",
    "ia_unary",
]

DEFAULT_PRECISION_BITS = 128

_INF = gmpy2.mpfr("inf")
_NINF = gmpy2.mpfr("-inf")
_ZERO = gmpy2.mpfr(0)
_ONE = gmpy2.mpfr(1)

ScalarLike = Union[int, float, str, Fraction, "gmpy2.mpfr", "gmpy2.mpq"]

# gmpy2's operators round results to the *calling thread's* context, so a
# bare unary minus would silently re-round wide endpoints to 53 bits.
# Negation must stay exact: go through a context at the operand's precision.
_NEG_CTXS: dict = {}


def exact_neg(x: "gmpy2.mpfr") -> "gmpy2.mpfr":
    p = x.precision
    c = _NEG_CTXS.get(p)
    if c is None:
        c = _NEG_CTXS[p] = gmpy2.context(precision=p)
    return c.minus(x)


class DomainError(ArithmeticError):
    """Operand lies outside the mathematical domain of the operation."""


class Interval:
    """Closed interval [lo, hi] with extended-real endpoints, lo <= hi."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        if gmpy2.is_nan(lo) or gmpy2.is_nan(hi):
            raise ValueError("NaN endpoint in interval")
        if not lo <= hi:
            raise ValueError(f"empty interval [{lo}, {hi}]")
        if lo == _INF or hi == _NINF:
            raise ValueError(f"degenerate infinite interval [{lo}, {hi}]")
        self.lo = lo
        self.hi = hi

    # -- predicates ----------------------------------------------------

    def is_point(self) -> bool:
        return self.lo == self.hi

    def contains(self, x) -> bool:
        return self.lo <= x <= self.hi

    def contains_zero(self) -> bool:
        return self.lo <= 0 <= self.hi

    def strictly_positive(self) -> bool:
        return self.lo > 0

    def strictly_negative(self) -> bool:
        return self.hi < 0

    def is_subset(self, other: "Interval") -> bool:
        return other.lo <= self.lo and self.hi <= other.hi

    def is_bounded(self) -> bool:
        return gmpy2.is_finite(self.lo) and gmpy2.is_finite(self.hi)

    def __eq__(self, other):
        return (
            isinstance(other, Interval)
            and self.lo == other.lo
            and self.hi == other.hi
        )

    def __hash__(self):
        return hash((str(self.lo), str(self.hi)))

    def __repr__(self):
        return f"[{self.lo}, {self.hi}]"


class IAContext:
    """Directed-rounding backend facade.

    Holds one gmpy2 context per rounding direction at a fixed working
    precision.  All interval constructors and operations go through it;
    there is no ambient mutable precision state.

    ``division_crosses_zero`` is a sticky diagnostic flag, set when a
    division's divisor contains zero in its interior (the result is then
    the unbounded interval).  It only ever transitions False -> True, so
    concurrent readers stay safe.
    """

    __slots__ = ("precision", "_dn", "_up", "division_crosses_zero")

    def __init__(self, precision: int = DEFAULT_PRECISION_BITS):
        if precision < 8:
            raise ValueError("backend precision must be at least 8 bits")
        self.precision = precision
        self._dn = gmpy2.context(precision=precision, round=gmpy2.RoundDown)
        self._up = gmpy2.context(precision=precision, round=gmpy2.RoundUp)
        self.division_crosses_zero = False

    # -- scalar conversion with directed rounding ----------------------

    def _convert(self, x: ScalarLike, ctx) -> "gmpy2.mpfr":
        if isinstance(x, gmpy2.mpfr):
            # operand may carry any precision; the context rounds directedly
            return ctx.add(x, _ZERO)
        if isinstance(x, float) or (
            isinstance(x, int) and x.bit_length() < self.precision
        ):
            # exact at its own width, then rounded directedly to ours
            return ctx.add(gmpy2.mpfr(x, max(x.bit_length(), 53) if isinstance(x, int) else 53), _ZERO)
        if isinstance(x, str):
            s = x.strip().lower()
            if s.startswith(("0x", "-0x", "+0x")):
                return ctx.add(gmpy2.mpfr(float.fromhex(s), 53), _ZERO)
            x = Fraction(s)
        if isinstance(x, int):
            x = Fraction(x)
        if isinstance(x, gmpy2.mpq):
            x = Fraction(x.numerator, x.denominator)
        if isinstance(x, Fraction):
            return ctx.div(gmpy2.mpz(x.numerator), gmpy2.mpz(x.denominator))
        raise TypeError(f"cannot convert {type(x).__name__} to interval endpoint")

    def num_dn(self, x: ScalarLike) -> "gmpy2.mpfr":
        """Largest backend value <= x."""
        return self._convert(x, self._dn)

    def num_up(self, x: ScalarLike) -> "gmpy2.mpfr":
        """Smallest backend value >= x."""
        return self._convert(x, self._up)

    # -- constructors ---------------------------------------------------

    def interval(self, lo: ScalarLike, hi: ScalarLike) -> Interval:
        return Interval(self.num_dn(lo), self.num_up(hi))

    def point(self, x: ScalarLike) -> Interval:
        return Interval(self.num_dn(x), self.num_up(x))

    def full(self) -> Interval:
        return Interval(_NINF, _INF)

    # -- binary operations ----------------------------------------------

    def add(self, a: Interval, b: Interval) -> Interval:
        return Interval(self._dn.add(a.lo, b.lo), self._up.add(a.hi, b.hi))

    def sub(self, a: Interval, b: Interval) -> Interval:
        return Interval(self._dn.sub(a.lo, b.hi), self._up.sub(a.hi, b.lo))

    def _mul_ep(self, ctx, x, y):
        # 0 * inf is 0 here: a zero endpoint means that factor is exactly 0.
        if x == 0 or y == 0:
            return _ZERO
        return ctx.mul(x, y)

    def mul(self, a: Interval, b: Interval) -> Interval:
        dn, up = self._dn, self._up
        al, ah, bl, bh = a.lo, a.hi, b.lo, b.hi
        if al >= 0:
            if bl >= 0:  # P * P
                return Interval(self._mul_ep(dn, al, bl), self._mul_ep(up, ah, bh))
            if bh <= 0:  # P * N
                return Interval(self._mul_ep(dn, ah, bl), self._mul_ep(up, al, bh))
            return Interval(self._mul_ep(dn, ah, bl), self._mul_ep(up, ah, bh))
        if ah <= 0:
            if bl >= 0:  # N * P
                return Interval(self._mul_ep(dn, al, bh), self._mul_ep(up, ah, bl))
            if bh <= 0:  # N * N
                return Interval(self._mul_ep(dn, ah, bh), self._mul_ep(up, al, bl))
            return Interval(self._mul_ep(dn, al, bh), self._mul_ep(up, al, bl))
        if bl >= 0:  # M * P
            return Interval(self._mul_ep(dn, al, bh), self._mul_ep(up, ah, bh))
        if bh <= 0:  # M * N
            return Interval(self._mul_ep(dn, ah, bl), self._mul_ep(up, al, bl))
        return Interval(  # M * M
            min(self._mul_ep(dn, al, bh), self._mul_ep(dn, ah, bl)),
            max(self._mul_ep(up, al, bl), self._mul_ep(up, ah, bh)),
        )

    def _div_ep(self, ctx, x, y):
        if x == 0:
            return _ZERO
        if gmpy2.is_infinite(y):
            # finite/inf -> 0; inf/inf cannot happen (divisor sign-definite,
            # numerator endpoint paired with the matching divisor endpoint)
            if gmpy2.is_infinite(x):
                raise AssertionError("inf/inf endpoint in interval division")
            return _ZERO
        return ctx.div(x, y)

    def div(self, a: Interval, b: Interval) -> Interval:
        dn, up = self._dn, self._up
        al, ah, bl, bh = a.lo, a.hi, b.lo, b.hi
        if bl == 0 and bh == 0:
            raise DomainError("division by the zero interval [0, 0]")
        if bl < 0 < bh:
            self.division_crosses_zero = True
            return self.full()
        if bl == 0:  # divisor (0, bh]
            if al >= 0:
                return Interval(self._div_ep(dn, al, bh), _INF)
            if ah <= 0:
                return Interval(_NINF, self._div_ep(up, ah, bh))
            return self.full()
        if bh == 0:  # divisor [bl, 0)
            if al >= 0:
                return Interval(_NINF, self._div_ep(up, al, bl))
            if ah <= 0:
                return Interval(self._div_ep(dn, ah, bl), _INF)
            return self.full()
        if bl > 0:
            if al >= 0:
                return Interval(self._div_ep(dn, al, bh), self._div_ep(up, ah, bl))
            if ah <= 0:
                return Interval(self._div_ep(dn, al, bl), self._div_ep(up, ah, bh))
            return Interval(self._div_ep(dn, al, bl), self._div_ep(up, ah, bl))
        # bh < 0
        if al >= 0:
            return Interval(self._div_ep(dn, ah, bh), self._div_ep(up, al, bl))
        if ah <= 0:
            return Interval(self._div_ep(dn, ah, bl), self._div_ep(up, al, bh))
        return Interval(self._div_ep(dn, ah, bh), self._div_ep(up, al, bh))

    def min(self, a: Interval, b: Interval) -> Interval:
        # selection of representable endpoints: exact, no rounding
        return Interval(min(a.lo, b.lo), min(a.hi, b.hi))

    def max(self, a: Interval, b: Interval) -> Interval:
        return Interval(max(a.lo, b.lo), max(a.hi, b.hi))

    # -- unary operations -------------------------------------------------

    def neg(self, a: Interval) -> Interval:
        return Interval(exact_neg(a.hi), exact_neg(a.lo))  # exact

    def abs(self, a: Interval) -> Interval:
        if a.lo >= 0:
            return a
        if a.hi <= 0:
            return self.neg(a)
        return Interval(_ZERO, max(exact_neg(a.lo), a.hi))

    def square(self, a: Interval) -> Interval:
        # even power: decorrelated, image is nonnegative
        m = self.abs(a)
        return Interval(self._mul_ep(self._dn, m.lo, m.lo),
                        self._mul_ep(self._up, m.hi, m.hi))

    def sqrt(self, a: Interval) -> Interval:
        if a.lo < 0:
            raise DomainError(f"sqrt of interval with negative lower end {a.lo}")
        return Interval(self._dn.sqrt(a.lo), self._up.sqrt(a.hi))

    def exp(self, a: Interval) -> Interval:
        return Interval(self._dn.exp(a.lo), self._up.exp(a.hi))

    def log(self, a: Interval) -> Interval:
        if a.lo < 0:
            raise DomainError(f"log of interval with negative lower end {a.lo}")
        if a.hi == 0:
            raise DomainError("log of the zero interval [0, 0]")
        lo = _NINF if a.lo == 0 else self._dn.log(a.lo)
        return Interval(lo, self._up.log(a.hi))

    def tanh(self, a: Interval) -> Interval:
        lo = self._dn.tanh(a.lo) if gmpy2.is_finite(a.lo) else gmpy2.mpfr(-1)
        hi = self._up.tanh(a.hi) if gmpy2.is_finite(a.hi) else gmpy2.mpfr(1)
        return Interval(max(lo, gmpy2.mpfr(-1)), min(hi, gmpy2.mpfr(1)))

    def sigmoid(self, a: Interval) -> Interval:
        # monotone increasing; each endpoint via 1/(1 + e^-x) with the
        # rounding direction chained through the composition
        dn, up = self._dn, self._up
        if gmpy2.is_finite(a.lo):
            lo = dn.div(_ONE, up.add(_ONE, up.exp(exact_neg(a.lo))))
        else:
            lo = _ZERO
        if gmpy2.is_finite(a.hi):
            hi = up.div(_ONE, dn.add(_ONE, dn.exp(exact_neg(a.hi))))
        else:
            hi = _ONE
        return Interval(max(lo, _ZERO), min(hi, _ONE))

    # -- set and widening helpers ----------------------------------------

    def hull(self, a: Interval, b: Interval) -> Interval:
        return Interval(min(a.lo, b.lo), max(a.hi, b.hi))

    def intersect(self, a: Interval, b: Interval) -> Interval:
        lo, hi = max(a.lo, b.lo), min(a.hi, b.hi)
        if lo > hi:
            raise ValueError(f"empty intersection of {a} and {b}")
        return Interval(lo, hi)

    def widen_abs(self, a: Interval, delta) -> Interval:
        """Enclose a + [-delta, +delta] for a nonnegative scalar delta."""
        d = self.num_up(delta)
        if d == 0:
            return a
        return Interval(self._dn.sub(a.lo, d), self._up.add(a.hi, d))

    def widen_rel(self, a: Interval, eps) -> Interval:
        """Enclose a * (1 + [-eps, +eps]) for a nonnegative scalar eps."""
        e = self.num_up(eps)
        if e == 0:
            return a
        return self.mul(a, Interval(self._dn.sub(_ONE, e), self._up.add(_ONE, e)))

    # -- magnitude bounds --------------------------------------------------

    def sup_abs(self, a: Interval) -> "gmpy2.mpfr":
        """sup |a| (may be +inf)."""
        return max(exact_neg(a.lo), a.hi) if a.lo < 0 else a.hi

    def inf_abs(self, a: Interval) -> "gmpy2.mpfr":
        """inf |a| (zero when the interval contains 0)."""
        if a.contains_zero():
            return _ZERO
        return a.lo if a.lo > 0 else exact_neg(a.hi)


_BINARY = {
    "add": IAContext.add,
    "sub": IAContext.sub,
    "mul": IAContext.mul,
    "div": IAContext.div,
    "min": IAContext.min,
    "max": IAContext.max,
}

_UNARY = {
    "neg": IAContext.neg,
    "abs": IAContext.abs,
    "sqrt": IAContext.sqrt,
    "exp": IAContext.exp,
    "log": IAContext.log,
    "tanh": IAContext.tanh,
    "sigmoid": IAContext.sigmoid,
    "square": IAContext.square,
}


def ia_binary(op: str, a: Interval, b: Interval, ctx: IAContext) -> Interval:
    """Dispatch a binary interval operation by name."""
    try:
        f = _BINARY[op]
    except KeyError:
        raise ValueError(f"unknown binary interval operation {op!r}") from None
    return f(ctx, a, b)


def ia_unary(f: str, a: Interval, ctx: IAContext) -> Interval:
    """Dispatch a unary interval operation by name."""
    try:
        g = _UNARY[f]
    except KeyError:
        raise ValueError(f"unknown unary interval operation {f!r}") from None
    return g(ctx, a)
