"""Software emulation of binary floating-point arithmetic at precision k.

Every operation computes the exact mathematical result and rounds it once
to a k-bit mantissa, round-to-nearest ties-to-even (MPFR semantics), so the
first FP error model holds with |eps| <= 1/2: fl(a o b) = (a o b)(1 + eps*u)
with u = 2^(1-k).  The exponent range is unbounded by default; an optional
(e_min, e_max) window turns overflow/underflow/subnormal results into a
raised range flag instead of silently wrapping.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Mapping, Optional, Union

import gmpy2

from .interval import DomainError, IAContext

__all__ = [
    "FpFormat",
    "FpContext",
    "RangeFlagError",
    "round_nearest",
    "fp_op",
    "parse_pow2",
    "DEFAULT_ELEMENTARY_BOUND",
    "DEFAULT_U_MAX_EXPONENT",
]

_ZERO = gmpy2.mpfr(0)

# round-to-nearest elementary rounding bound, in units of u
DEFAULT_ELEMENTARY_BOUND = 0.5
# certified-u ceiling 2^-7 unless the caller says otherwise
DEFAULT_U_MAX_EXPONENT = -7

_ELEMENTARY_OPS = ("add", "sub", "mul", "div", "sqrt", "exp", "log", "tanh", "round")


class RangeFlagError(ArithmeticError):
    """Result exponent left the configured (e_min, e_max) window."""


class FpFormat:
    """Binary FP format with k mantissa bits; u = 2^(1-k).

    k = 24 reproduces IEEE binary32 rounding on in-range normal values,
    k = 53 reproduces binary64.
    """

    __slots__ = ("k", "u", "e_min", "e_max", "_ctx")

    def __init__(self, k: int, e_min: Optional[int] = None, e_max: Optional[int] = None):
        if not isinstance(k, int) or k < 2:
            raise ValueError(f"precision k must be an integer >= 2, got {k!r}")
        if k > 1020:
            raise ValueError("precision k above 1020 is not supported")
        self.k = k
        self.u = 2.0 ** (1 - k)
        self.e_min = e_min
        self.e_max = e_max
        self._ctx = gmpy2.context(precision=k, round=gmpy2.RoundToNearest)

    def _checked(self, r: "gmpy2.mpfr") -> "gmpy2.mpfr":
        if self.e_min is None and self.e_max is None:
            return r
        if r != 0 and gmpy2.is_finite(r):
            # MPFR convention: value = m * 2^e with 0.5 <= |m| < 1
            e = gmpy2.get_exp(r)
            if self.e_max is not None and e - 1 > self.e_max:
                raise RangeFlagError(f"overflow: exponent {e - 1} > e_max {self.e_max}")
            if self.e_min is not None and e - 1 < self.e_min:
                raise RangeFlagError(
                    f"underflow/subnormal: exponent {e - 1} < e_min {self.e_min}"
                )
        elif gmpy2.is_infinite(r) and self.e_max is not None:
            raise RangeFlagError("overflow to infinity")
        return r

    def round(self, x: Union[int, float, Fraction, "gmpy2.mpfr"]) -> "gmpy2.mpfr":
        """Round a real value to this format (nearest, ties to even)."""
        if isinstance(x, Fraction):
            if x.denominator == 1:
                x = gmpy2.mpz(x.numerator)
            else:
                return self._checked(
                    self._ctx.div(gmpy2.mpz(x.numerator), gmpy2.mpz(x.denominator))
                )
        if isinstance(x, float):
            x = gmpy2.mpfr(x, 53)
        elif isinstance(x, (int, gmpy2.mpz)):
            x = gmpy2.mpfr(x, max(int(x).bit_length(), 53))
        return self._checked(self._ctx.add(x, _ZERO))

    # exact binary operations, each correctly rounded once at precision k

    def add(self, a, b):
        return self._checked(self._ctx.add(a, b))

    def sub(self, a, b):
        return self._checked(self._ctx.sub(a, b))

    def mul(self, a, b):
        return self._checked(self._ctx.mul(a, b))

    def div(self, a, b):
        if b == 0:
            raise DomainError("FP division by zero")
        return self._checked(self._ctx.div(a, b))

    def sqrt(self, a):
        if a < 0:
            raise DomainError(f"FP sqrt of negative value {a}")
        return self._checked(self._ctx.sqrt(a))

    def exp(self, a):
        return self._checked(self._ctx.exp(a))

    def log(self, a):
        if a < 0:
            raise DomainError(f"FP log of negative value {a}")
        return self._checked(self._ctx.log(a))

    def tanh(self, a):
        return self._checked(self._ctx.tanh(a))

    def __repr__(self):
        return f"FpFormat(k={self.k})"


def round_nearest(x, fmt: FpFormat) -> "gmpy2.mpfr":
    """Round x to fmt's grid; |result - x| <= (u/2)|x| for finite x."""
    return fmt.round(x)


_FP_BINARY = {"add": FpFormat.add, "sub": FpFormat.sub, "mul": FpFormat.mul, "div": FpFormat.div}
_FP_UNARY = {"sqrt": FpFormat.sqrt, "exp": FpFormat.exp, "log": FpFormat.log, "tanh": FpFormat.tanh}


def fp_op(op: str, a, b=None, fmt: FpFormat = None) -> "gmpy2.mpfr":
    """Emulated FP operation: exact result rounded once at precision k."""
    if fmt is None:
        raise TypeError("fp_op requires an FpFormat")
    if op in _FP_BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _FP_BINARY[op](fmt, a, b)
    if op in _FP_UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _FP_UNARY[op](fmt, a)
    raise ValueError(f"unknown FP operation {op!r}")


def parse_pow2(text: Union[str, float, int]) -> int:
    """Parse a power-of-two spec like "2^-7" (or an exact float) to its exponent."""
    if isinstance(text, str):
        s = text.strip().replace("**", "^")
        if s.startswith("2^"):
            return int(s[2:])
        value = float(s)
    else:
        value = float(text)
    if value <= 0:
        raise ValueError(f"not a positive power of two: {text!r}")
    m, e = math.frexp(value)
    if m != 0.5:
        raise ValueError(f"not an exact power of two: {text!r}")
    return e - 1


class FpContext:
    """Everything a bound computation needs to know about the FP target.

    * ``format``  -- the emulated format producing concrete FP values;
    * ``u_max``   -- ceiling on u = 2^(1-k): every bound computed under this
      context is valid verbatim for all k with 2^(1-k) <= u_max;
    * ``ia``      -- the interval backend used for all range reasoning;
    * ``elementary_bounds`` -- per-operation single-rounding bound in units
      of u (default 1/2 = correctly rounded; set 1.0 to model a merely
      faithful implementation of some function).
    """

    __slots__ = ("format", "u_max", "u_max_exponent", "coarsest_k", "ia",
                 "elementary_bounds")

    def __init__(
        self,
        fmt: FpFormat,
        u_max: Union[str, float, int] = None,
        ia: Optional[IAContext] = None,
        elementary_bounds: Optional[Mapping[str, float]] = None,
    ):
        e = DEFAULT_U_MAX_EXPONENT if u_max is None else parse_pow2(u_max)
        if e > -1:
            raise ValueError("u_max must be at most 2^-1")
        if e < -1019:
            raise ValueError("u_max below 2^-1019 is not supported")
        self.u_max_exponent = e
        self.u_max = 2.0 ** e
        self.coarsest_k = 1 - e
        if fmt.u > self.u_max:
            raise ValueError(
                f"format u = 2^{1 - fmt.k} exceeds u_max = 2^{e}; "
                f"emulate k >= {self.coarsest_k}"
            )
        self.format = fmt
        self.ia = ia if ia is not None else IAContext()
        bounds = dict.fromkeys(_ELEMENTARY_OPS, DEFAULT_ELEMENTARY_BOUND)
        if elementary_bounds:
            for name, value in elementary_bounds.items():
                if name not in bounds:
                    raise ValueError(f"unknown elementary-bound key {name!r}")
                if not 0.0 <= float(value):
                    raise ValueError(f"elementary bound for {name} must be >= 0")
                bounds[name] = float(value)
        self.elementary_bounds = bounds

    def eps(self, op: str) -> float:
        return self.elementary_bounds[op]

    def __repr__(self):
        return f"FpContext(k={self.format.k}, u_max=2^{self.u_max_exponent})"
