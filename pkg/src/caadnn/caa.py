"""Combined absolute/relative affine arithmetic over interval ranges.

Each tracked value is a :class:`Quantity` carrying, besides the emulated FP
value itself, an absolute error bound ``abs_bound`` and a relative error
bound ``rel_bound`` (either may be +inf), both expressed in units of
u = 2^(1-k), plus interval enclosures of the infinitely precise value and
of every value a rounding FP evaluation can produce.  The two bounds
certify, for EVERY precision k with 2^(1-k) <= ctx.u_max:

    |emulated - exact| <= abs_bound * u               (absolute form)
    |emulated - exact| <= rel_bound * u * |exact|     (relative form)

Bound propagation keeps higher-order terms by treating u as the interval
[0, u_max] and rounding every intermediate upward, so a bound computed once
is valid verbatim at any certified precision.

Decorrelation: quantities carry creation-ordered unique ids, copied on
assignment; subtraction, division, min and max check ids first, so q - q is
exactly zero and q / q exactly one.  Quantities may additionally be labeled
with other quantities known to bound them; subtraction exploits the labels
to clip result ranges (the min/max control-flow pattern).
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Optional

import gmpy2

from .fpformat import FpContext
from .interval import DomainError, IAContext, Interval, exact_neg

__all__ = [
    "Quantity",
    "PropagationTerms",
    "propagation_terms",
    "mk_const",
    "mk_input",
    "caa_add",
    "caa_sub",
    "caa_mul",
    "caa_div",
    "caa_sqrt",
    "caa_exp",
    "caa_log",
    "caa_tanh",
    "caa_max",
    "caa_min",
    "caa_neg",
    "refine",
    "attach_bounds",
    "clamp_range",
]

_INF = math.inf
# >= the true 2.63 regardless of how the literal parses
_TANH_REL_FACTOR = math.nextafter(2.63, _INF)

# process-unique, monotonically increasing ids; next() is atomic under the GIL
_ids = itertools.count(1)

_ZERO = gmpy2.mpfr(0)
_ONE = gmpy2.mpfr(1)

# round-to-nearest contexts per coarsest-precision value, for representability tests
_NEAREST_CTXS: dict = {}


def _nearest_ctx(k: int):
    ctx = _NEAREST_CTXS.get(k)
    if ctx is None:
        ctx = _NEAREST_CTXS[k] = gmpy2.context(precision=k, round=gmpy2.RoundToNearest)
    return ctx


# ---------------------------------------------------------------------------
# upward-rounded scalar bound arithmetic (floats, +inf saturating)
# ---------------------------------------------------------------------------

def _up(x: float) -> float:
    return math.nextafter(x, _INF)


def _up_add(a: float, b: float) -> float:
    return math.nextafter(a + b, _INF)


def _up_mul(a: float, b: float) -> float:
    # 0 * inf = 0: a zero bound means that factor's contribution is exactly 0
    if a == 0.0 or b == 0.0:
        return 0.0
    return math.nextafter(a * b, _INF)


def _up_div(a: float, b: float) -> float:
    if a == 0.0:
        return 0.0
    return math.nextafter(a / b, _INF)


def _dn(x: float) -> float:
    return math.nextafter(x, -_INF)


def _f_up(m) -> float:
    """Float upper bound of an mpfr value (may be +inf)."""
    f = float(m)
    if math.isinf(f):
        return f
    return math.nextafter(f, _INF)


def _f_dn(m) -> float:
    f = float(m)
    if math.isinf(f):
        return f
    return math.nextafter(f, -_INF)


# ---------------------------------------------------------------------------
# the arithmetical object
# ---------------------------------------------------------------------------

class Quantity:
    """One tracked FP value with certified error bounds; immutable."""

    __slots__ = ("id", "fp_value", "actual_error", "abs_bound", "rel_bound",
                 "exact_range", "rounded_range", "lower_label", "upper_label")

    def __init__(self, id, fp_value, actual_error, abs_bound, rel_bound,
                 exact_range, rounded_range, lower_label=None, upper_label=None):
        self.id = id
        self.fp_value = fp_value
        self.actual_error = actual_error
        self.abs_bound = abs_bound
        self.rel_bound = rel_bound
        self.exact_range = exact_range
        self.rounded_range = rounded_range
        self.lower_label = lower_label
        self.upper_label = upper_label

    def is_exact_point(self) -> bool:
        """True when this is a known exact value at every certified precision."""
        return (self.abs_bound == 0.0 and self.rel_bound == 0.0
                and self.exact_range.is_point())

    def __repr__(self):
        rel = "inf" if self.rel_bound == _INF else f"{self.rel_bound:g}"
        ab = "inf" if self.abs_bound == _INF else f"{self.abs_bound:g}"
        return (f"Quantity(id={self.id}, fp={self.fp_value}, abs={ab}u, rel={rel}u, "
                f"exact={self.exact_range}, rounded={self.rounded_range})")


class PropagationTerms:
    """Amplification enclosures for an addition/subtraction, plus the
    elementary rounding bound of the combining operation."""

    __slots__ = ("alpha_r", "alpha_s", "eps_op")

    def __init__(self, alpha_r: Interval, alpha_s: Interval, eps_op: float):
        self.alpha_r = alpha_r
        self.alpha_s = alpha_s
        self.eps_op = eps_op

    def __repr__(self):
        return f"PropagationTerms(alpha_r={self.alpha_r}, alpha_s={self.alpha_s}, eps_op={self.eps_op})"


def propagation_terms(r: Quantity, s: Quantity, ctx: FpContext,
                      subtract: bool = False) -> PropagationTerms:
    """Enclose alpha_r = r/(r +- s) and alpha_s = s/(r +- s) by IA.

    Unbounded (full) intervals when the denominator range contains zero:
    relative affine propagation breaks down there.
    """
    ia = ctx.ia
    R, S = r.exact_range, s.exact_range
    den = ia.sub(R, S) if subtract else ia.add(R, S)
    eps = ctx.eps("sub" if subtract else "add")
    if den.contains_zero():
        return PropagationTerms(ia.full(), ia.full(), eps)
    return PropagationTerms(ia.div(R, den), ia.div(S, den), eps)


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, float)):
        return Fraction(x)
    if isinstance(x, gmpy2.mpfr):
        if not gmpy2.is_finite(x):
            raise ValueError("constants must be finite")
        q = gmpy2.mpq(x)
        return Fraction(int(q.numerator), int(q.denominator))
    if isinstance(x, (gmpy2.mpq, gmpy2.mpz)):
        return Fraction(int(gmpy2.mpq(x).numerator), int(gmpy2.mpq(x).denominator))
    if isinstance(x, str):
        s = x.strip().lower()
        if s.startswith(("0x", "-0x", "+0x")):
            return Fraction(float.fromhex(s))
        return Fraction(s)
    raise TypeError(f"cannot interpret {type(x).__name__} as an exact real")


def _representable(frac: Fraction, k: int) -> bool:
    """Is the value exactly representable with a k-bit mantissa (any exponent)?"""
    if frac == 0:
        return True
    ctx = _nearest_ctx(k)
    r = ctx.div(gmpy2.mpz(frac.numerator), gmpy2.mpz(frac.denominator))
    q = gmpy2.mpq(r)
    return Fraction(int(q.numerator), int(q.denominator)) == frac


_TWO_53 = float(1 << 53)


def _float_mantissa_width(x: float) -> int:
    """Significant mantissa bits of a nonzero finite float (exponent-free)."""
    m = int(math.frexp(x)[0] * _TWO_53)
    return m.bit_length() - (m & -m).bit_length() + 1


def _mpfr_representable(x, k: int) -> bool:
    return _nearest_ctx(k).add(x, _ZERO) == x


def _finish(qid, fp, err, abs_u, rel_u, exact, rounded, ctx,
            lower=None, upper=None) -> Quantity:
    """Cross-refine the two bounds, tighten ranges, clamp the reference error.

    Refinement order (idempotent): first the relative bound from the absolute
    one when the exact range excludes zero, then the absolute bound from the
    relative one.  The rounded range is intersected with the exact range
    widened by each finite bound; both enclosures are certified, so their
    intersection is too.
    """
    ia = ctx.ia
    u_max = ctx.u_max
    if abs_u < _INF and not exact.contains_zero():
        m = _f_dn(ia.inf_abs(exact))
        if m > 0.0:
            rel_u = min(rel_u, _up_div(abs_u, m))
    if rel_u < _INF:
        abs_u = min(abs_u, _up_mul(rel_u, _f_up(ia.sup_abs(exact))))
    if abs_u < _INF:
        rounded = ia.intersect(rounded, ia.widen_abs(exact, _up_mul(abs_u, u_max)))
    if rel_u < _INF:
        rounded = ia.intersect(rounded, ia.widen_rel(exact, _up_mul(rel_u, u_max)))
    if abs_u < _INF:
        bound = _up_mul(abs_u, ctx.format.u)
        err = ia.intersect(err, ctx.ia.interval(-bound, bound))
    if not rounded.contains(fp):
        raise AssertionError(
            f"soundness bug: emulated value {fp} escaped rounded range {rounded}")
    return Quantity(qid, fp, err, abs_u, rel_u, exact, rounded, lower, upper)


def _exact_quantity(value, ctx: FpContext, qid=None) -> Quantity:
    """Quantity for a value exact at every certified precision."""
    ia = ctx.ia
    rng = ia.point(value)
    fp = ctx.format.round(value)
    err = ia.interval(0, 0)
    return Quantity(qid if qid is not None else next(_ids),
                    fp, err, 0.0, 0.0, rng, rng)


_ZERO_IV = Interval(_ZERO, _ZERO)


def mk_const(x, ctx: FpContext) -> Quantity:
    """Quantity for a known constant.

    Exactly representable at the coarsest certified precision (hence at every
    finer one): zero bounds and point ranges.  Otherwise one initial rounding
    is charged: rel_bound = the elementary rounding bound, abs_bound derived
    from it and the constant's magnitude.
    """
    if isinstance(x, float) and math.isfinite(x):
        # floats denote exact binary values: no outward rounding needed,
        # and the representability test is a pure mantissa-width check
        if x == 0.0:
            return Quantity(next(_ids), _ZERO, _ZERO_IV, 0.0, 0.0, _ZERO_IV, _ZERO_IV)
        v = gmpy2.mpfr(x, 53)
        rng = Interval(v, v)
        if _float_mantissa_width(x) <= ctx.coarsest_k:
            return Quantity(next(_ids), v, _ZERO_IV, 0.0, 0.0, rng, rng)
        ia = ctx.ia
        eps = ctx.eps("round")
        abs_u = _up_mul(eps, _up(abs(x)))
        rounded = ia.widen_rel(rng, _up_mul(eps, ctx.u_max))
        fp = ctx.format.round(v)
        err = ia.sub(Interval(fp, fp), rng)
        return _finish(next(_ids), fp, err, abs_u, eps, rng, rounded, ctx)
    frac = _to_fraction(x)
    if _representable(frac, ctx.coarsest_k):
        return _exact_quantity(frac, ctx)
    ia = ctx.ia
    eps = ctx.eps("round")
    exact = ia.point(frac)
    rel = eps
    abs_u = _up_mul(rel, _f_up(ia.sup_abs(exact)))
    rounded = ia.widen_rel(exact, _up_mul(rel, ctx.u_max))
    fp = ctx.format.round(frac)
    err = ia.sub(Interval(fp, fp), exact)
    return _finish(next(_ids), fp, err, abs_u, rel, exact, rounded, ctx)


def mk_input(rng, value, ctx: FpContext) -> Quantity:
    """Quantity for a network input: declared range plus the concrete value.

    The input is assumed to arrive as an exact FP datum when the value is
    representable at the coarsest certified precision (integer pixel data,
    k-bit sensor words); otherwise one initial rounding is charged.
    """
    ia = ctx.ia
    if not isinstance(rng, Interval):
        rng = ia.interval(rng[0], rng[1])
    frac = _to_fraction(value)
    num, den = gmpy2.mpz(frac.numerator), gmpy2.mpz(frac.denominator)
    lo_q, hi_q = gmpy2.mpq(rng.lo), gmpy2.mpq(rng.hi)
    val_q = gmpy2.mpq(num, den)
    if not (lo_q <= val_q <= hi_q):
        raise ValueError(f"input value {value} outside declared range {rng}")
    if _representable(frac, ctx.coarsest_k):
        fp = ctx.format.round(frac)
        err = ia.interval(0, 0)
        return Quantity(next(_ids), fp, err, 0.0, 0.0, rng, rng)
    eps = ctx.eps("round")
    k0 = ctx.coarsest_k
    if _mpfr_representable(rng.lo, k0) and _mpfr_representable(rng.hi, k0):
        # rounding is monotone and fixes representable endpoints,
        # so rounded inputs cannot escape the declared range
        rounded = rng
    else:
        rounded = ia.hull(rng, ia.widen_rel(rng, _up_mul(eps, ctx.u_max)))
    abs_u = _up_mul(eps, _f_up(ia.sup_abs(rng)))
    fp = ctx.format.round(frac)
    err = ia.sub(Interval(fp, fp), ia.point(frac))
    return _finish(next(_ids), fp, err, abs_u, eps, rng, rounded, ctx)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _tight_exact(q: Quantity, ia: IAContext) -> Interval:
    """Sharpest available enclosure of q's infinitely precise value."""
    fp_pt = Interval(q.fp_value, q.fp_value)
    return ia.intersect(q.exact_range, ia.sub(fp_pt, q.actual_error))


def _err_interval(fp, exact_tight: Interval, ia: IAContext) -> Interval:
    return ia.sub(Interval(fp, fp), exact_tight)


def _try_exact_binary(r: Quantity, s: Quantity, ctx: FpContext, op: str):
    """Exact-result fast path: both operands exact points, result exactly
    computable and representable at the coarsest certified precision."""
    if not (r.is_exact_point() and s.is_exact_point()):
        return None
    ia = ctx.ia
    a = Interval(r.exact_range.lo, r.exact_range.lo)
    b = Interval(s.exact_range.lo, s.exact_range.lo)
    try:
        res = getattr(ia, op)(a, b)
    except DomainError:
        return None
    if res.lo == res.hi and _mpfr_representable(res.lo, ctx.coarsest_k):
        return _exact_quantity(res.lo, ctx)
    return None


_NONPOS = Interval(gmpy2.mpfr("-inf"), _ZERO)
_NONNEG = Interval(_ZERO, gmpy2.mpfr("inf"))


# ---------------------------------------------------------------------------
# addition / subtraction
# ---------------------------------------------------------------------------

def _add_sub(r: Quantity, s: Quantity, ctx: FpContext, subtract: bool) -> Quantity:
    ia = ctx.ia
    fmt = ctx.format
    if subtract:
        if r.id == s.id:
            # copies of each other: full cancellation, exactly zero
            return _exact_quantity(0, ctx)
        if s.is_exact_point() and s.exact_range.lo == 0:
            return r
        if r.is_exact_point() and r.exact_range.lo == 0:
            return caa_neg(s, ctx)  # 0 - s is exact negation at every precision
    else:
        if s.is_exact_point() and s.exact_range.lo == 0:
            return r
        if r.is_exact_point() and r.exact_range.lo == 0:
            return s
    fast = _try_exact_binary(r, s, ctx, "sub" if subtract else "add")
    if fast is not None:
        return fast

    R, S = r.exact_range, s.exact_range
    if subtract:
        D = ia.sub(R, S)
        T = ia.sub(r.rounded_range, s.rounded_range)
        if r.upper_label is not None and r.upper_label.id == s.id:
            # r <= s structurally, in exact and rounded semantics alike
            D = ia.intersect(D, _NONPOS)
            T = ia.intersect(T, _NONPOS)
        elif r.lower_label is not None and r.lower_label.id == s.id:
            D = ia.intersect(D, _NONNEG)
            T = ia.intersect(T, _NONNEG)
    else:
        D = ia.add(R, S)
        T = ia.add(r.rounded_range, s.rounded_range)

    eps = ctx.eps("sub" if subtract else "add")
    u = ctx.u_max
    rel_r, rel_s = r.rel_bound, s.rel_bound
    if rel_r == 0.0 and rel_s == 0.0:
        amp = 0.0  # exact operands: only the final rounding remains
    elif rel_r == _INF or rel_s == _INF or D.contains_zero():
        amp = _INF
    else:
        alpha_r = _f_up(ia.sup_abs(ia.div(R, D)))
        alpha_s = _f_up(ia.sup_abs(ia.div(S, D)))
        amp = _up_add(_up_mul(rel_r, alpha_r), _up_mul(rel_s, alpha_s))
    rel = _up_add(_up_add(amp, eps), _up_mul(_up_mul(amp, eps), u))
    abs_u = _up_add(_up_add(r.abs_bound, s.abs_bound),
                    _up_mul(eps, _f_up(ia.sup_abs(T))))
    rounded = ia.widen_rel(T, _up_mul(eps, u))
    fp = fmt.sub(r.fp_value, s.fp_value) if subtract else fmt.add(r.fp_value, s.fp_value)
    tr, ts = _tight_exact(r, ia), _tight_exact(s, ia)
    tight = ia.intersect(ia.sub(tr, ts) if subtract else ia.add(tr, ts), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, rounded, ctx)


def caa_add(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    return _add_sub(r, s, ctx, False)


def caa_sub(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    return _add_sub(r, s, ctx, True)


# ---------------------------------------------------------------------------
# multiplication / division / square root
# ---------------------------------------------------------------------------

def caa_mul(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    for a, b in ((r, s), (s, r)):
        if a.is_exact_point():
            v = a.exact_range.lo
            if v == 0:
                return _exact_quantity(0, ctx)  # annihilator, exact at all k
            if v == 1:
                return b  # exact identity: copy, id preserved
    fast = _try_exact_binary(r, s, ctx, "mul")
    if fast is not None:
        return fast
    ia = ctx.ia
    R, S = r.exact_range, s.exact_range
    D = ia.mul(R, S)
    T = ia.mul(r.rounded_range, s.rounded_range)
    eps = ctx.eps("mul")
    u = ctx.u_max
    rel_r, rel_s = r.rel_bound, s.rel_bound
    if rel_r < _INF and rel_s < _INF:
        # ((1+er u)(1+es u)(1+e u) - 1)/u expanded in powers of u <= u_max
        first = _up_add(_up_add(rel_r, rel_s), eps)
        second = _up_add(_up_add(_up_mul(rel_r, rel_s), _up_mul(rel_r, eps)),
                         _up_mul(rel_s, eps))
        third = _up_mul(_up_mul(rel_r, rel_s), eps)
        rel = _up_add(first, _up_add(_up_mul(second, u),
                                     _up_mul(third, _up_mul(u, u))))
    else:
        rel = _INF
    sup_r = _f_up(ia.sup_abs(R))
    sup_s = _f_up(ia.sup_abs(S))
    abs_u = _up_add(
        _up_add(_up_mul(sup_r, s.abs_bound), _up_mul(sup_s, r.abs_bound)),
        _up_add(_up_mul(_up_mul(r.abs_bound, s.abs_bound), u),
                _up_mul(eps, _f_up(ia.sup_abs(T)))))
    rounded = ia.widen_rel(T, _up_mul(eps, u))
    fp = ctx.format.mul(r.fp_value, s.fp_value)
    tight = ia.intersect(ia.mul(_tight_exact(r, ia), _tight_exact(s, ia)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, rounded, ctx)


def caa_div(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    ia = ctx.ia
    S = s.exact_range
    if S.lo == 0 and S.hi == 0:
        raise DomainError("division by an exactly-zero quantity")
    if r.id == s.id:
        return _exact_quantity(1, ctx)  # x / x: copies, exactly one
    if s.is_exact_point() and s.exact_range.lo == 1:
        return r
    fast = _try_exact_binary(r, s, ctx, "div")
    if fast is not None:
        return fast
    fmt = ctx.format
    if s.fp_value == 0:
        raise DomainError("emulated division by a zero FP divisor")
    R = r.exact_range
    D = ia.div(R, S)
    try:
        T = ia.div(r.rounded_range, s.rounded_range)
    except DomainError:
        T = ia.full()
    eps = ctx.eps("div")
    u = ctx.u_max
    fp = fmt.div(r.fp_value, s.fp_value)
    if S.contains_zero():
        # divisor range reaches zero: no finite bound exists
        err = ia.full()
        return _finish(next(_ids), fp, err, _INF, _INF, D, ia.full(), ctx)
    rel_r, rel_s = r.rel_bound, s.rel_bound
    den = _dn(1.0 - _up_mul(rel_s, u))
    if rel_r < _INF and rel_s < _INF and den > 0.0:
        num = _up_add(_up_add(rel_r, eps),
                      _up_add(rel_s, _up_mul(rel_r, _up_mul(eps, u))))
        rel = _up_div(num, den)
    else:
        rel = _INF
    # direct absolute route: (dr*s - ds*r) u / (s_hat * s), plus the rounding
    m_rr = _f_dn(ia.inf_abs(s.rounded_range))
    m_ex = _f_dn(ia.inf_abs(S))
    if m_rr > 0.0 and m_ex > 0.0 and (r.abs_bound < _INF and s.abs_bound < _INF):
        num_abs = _up_add(_up_mul(r.abs_bound, _f_up(ia.sup_abs(S))),
                          _up_mul(s.abs_bound, _f_up(ia.sup_abs(R))))
        abs_u = _up_add(_up_div(num_abs, _dn(m_rr * m_ex)),
                        _up_mul(eps, _f_up(ia.sup_abs(T))))
    else:
        abs_u = _INF
    rounded = ia.widen_rel(T, _up_mul(eps, u))
    tight = ia.intersect(ia.div(_tight_exact(r, ia), _tight_exact(s, ia)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, rounded, ctx)


def caa_sqrt(r: Quantity, ctx: FpContext) -> Quantity:
    ia = ctx.ia
    R = r.exact_range
    if R.lo < 0:
        raise DomainError(f"sqrt of a quantity with range {R}")
    fast = None
    if r.is_exact_point():
        a = Interval(R.lo, R.lo)
        res = ia.sqrt(a)
        if res.lo == res.hi and _mpfr_representable(res.lo, ctx.coarsest_k):
            fast = _exact_quantity(res.lo, ctx)
    if fast is not None:
        return fast
    # the emulated operand cannot drift below zero in a domain-valid program
    rr = ia.intersect(r.rounded_range, _NONNEG)
    D = ia.sqrt(R)
    T = ia.sqrt(rr)
    eps = ctx.eps("sqrt")
    u = ctx.u_max
    rel_r = r.rel_bound
    if rel_r < _INF and _up_mul(rel_r, u) < 1.0:
        # sqrt(1+x) = 1 + x/(1+sqrt(1+x)); |x| <= rel_r*u
        x = ia.mul(ia.point(rel_r), ia.point(u))
        root = ia.sqrt(ia.intersect(ia.sub(ia.point(1), x), _NONNEG))
        eta = _f_up(ia.sup_abs(ia.div(x, ia.mul(ia.point(u),
                                                ia.add(ia.point(1), root)))))
        rel = _up_add(_up_add(eta, eps), _up_mul(_up_mul(eta, eps), u))
    else:
        rel = _INF
    # Lipschitz absolute route when the perturbed operand stays away from 0
    low = ia.widen_abs(R, _up_mul(r.abs_bound, u)) if r.abs_bound < _INF else ia.full()
    if r.abs_bound < _INF and low.lo > 0:
        lip = _f_up(ia.sup_abs(ia.div(ia.point(1),
                                      ia.mul(ia.point(2),
                                             ia.sqrt(Interval(low.lo, low.lo))))))
        abs_u = _up_add(_up_mul(lip, r.abs_bound),
                        _up_mul(eps, _f_up(ia.sup_abs(T))))
    else:
        abs_u = _INF
    rounded = ia.intersect(ia.widen_rel(T, _up_mul(eps, u)), _NONNEG)
    fp = ctx.format.sqrt(r.fp_value)
    tight = ia.intersect(ia.sqrt(ia.intersect(_tight_exact(r, ia), _NONNEG)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, rounded, ctx)


# ---------------------------------------------------------------------------
# exp / log / tanh
# ---------------------------------------------------------------------------

def caa_exp(r: Quantity, ctx: FpContext) -> Quantity:
    if r.is_exact_point() and r.exact_range.lo == 0:
        return _exact_quantity(1, ctx)
    ia = ctx.ia
    R = r.exact_range
    D = ia.exp(R)
    T = ia.exp(r.rounded_range)
    eps = ctx.eps("exp")
    u = ctx.u_max
    if r.abs_bound < _INF:
        # incoming absolute error becomes relative: (e^(d u) - 1)/u at u_max
        du = ia.mul(ia.point(r.abs_bound), ia.point(u))
        eta = _f_up(ia.sup_abs(ia.div(ia.sub(ia.exp(du), ia.point(1)),
                                      ia.point(u))))
        rel = _up_add(_up_add(eta, eps), _up_mul(_up_mul(eta, eps), u))
    else:
        rel = _INF
    rounded = ia.intersect(ia.widen_rel(T, _up_mul(eps, u)), _NONNEG)
    fp = ctx.format.exp(r.fp_value)
    tight = ia.intersect(ia.exp(_tight_exact(r, ia)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, _INF, rel, D, rounded, ctx)


def caa_log(r: Quantity, ctx: FpContext) -> Quantity:
    ia = ctx.ia
    R = r.exact_range
    if R.lo < 0:
        raise DomainError(f"log of a quantity with range {R}")
    if R.hi == 0:
        raise DomainError("log of an exactly-zero quantity")
    if r.is_exact_point() and R.lo == 1:
        return _exact_quantity(0, ctx)
    rr = ia.intersect(r.rounded_range, _NONNEG)
    if rr.hi == 0:
        raise DomainError("log of a quantity whose emulated value is zero")
    D = ia.log(R)
    T = ia.log(rr)
    eps = ctx.eps("log")
    u = ctx.u_max
    rel_r = r.rel_bound
    if rel_r < _INF and _up_mul(rel_r, u) < 1.0:
        # incoming relative error becomes absolute: sup |log(1+x)|/u = -log(1-eps*u)/u
        x = ia.mul(ia.point(rel_r), ia.point(u))
        one_minus = ia.sub(ia.point(1), x)
        if one_minus.lo > 0:
            din = _f_up(ia.sup_abs(ia.div(ia.log(one_minus), ia.point(u))))
            abs_u = _up_add(din, _up_mul(eps, _f_up(ia.sup_abs(T))))
        else:
            abs_u = _INF
    else:
        abs_u = _INF
    rounded = ia.widen_rel(T, _up_mul(eps, u))
    fp = ctx.format.log(r.fp_value)
    tight = ia.intersect(ia.log(ia.intersect(_tight_exact(r, ia), _NONNEG)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, _INF, D, rounded, ctx)


_MINUS_ONE_ONE = Interval(gmpy2.mpfr(-1), gmpy2.mpfr(1))


def caa_tanh(r: Quantity, ctx: FpContext) -> Quantity:
    if r.is_exact_point() and r.exact_range.lo == 0:
        return _exact_quantity(0, ctx)
    ia = ctx.ia
    R = r.exact_range
    D = ia.tanh(R)
    T = ia.tanh(r.rounded_range)
    eps = ctx.eps("tanh")
    u = ctx.u_max
    # 1-Lipschitz: absolute error passes through with no amplification
    abs_u = _up_add(r.abs_bound, _up_mul(eps, _f_up(ia.sup_abs(T))))
    rel_r = r.rel_bound
    if rel_r < _INF and _up_mul(rel_r, u) <= 0.25:
        amp = _up_mul(_TANH_REL_FACTOR, rel_r)
        rel = _up_add(_up_add(amp, eps), _up_mul(_up_mul(amp, eps), u))
    else:
        rel = _INF
    rounded = ia.intersect(ia.widen_rel(T, _up_mul(eps, u)), _MINUS_ONE_ONE)
    fp = ctx.format.tanh(r.fp_value)
    tight = ia.intersect(ia.tanh(_tight_exact(r, ia)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, rounded, ctx)


# ---------------------------------------------------------------------------
# min / max / negation
# ---------------------------------------------------------------------------

def _with_labels(q: Quantity, lower=None, upper=None) -> Quantity:
    return Quantity(q.id, q.fp_value, q.actual_error, q.abs_bound, q.rel_bound,
                    q.exact_range, q.rounded_range,
                    lower if lower is not None else q.lower_label,
                    upper if upper is not None else q.upper_label)


def _min_max(r: Quantity, s: Quantity, ctx: FpContext, want_max: bool) -> Quantity:
    if r.id == s.id:
        return r  # max(x, x) is x, a copy
    ia = ctx.ia
    R, S = r.exact_range, s.exact_range
    rr, rs = r.rounded_range, s.rounded_range
    if want_max:
        if R.lo >= S.hi and rr.lo >= rs.hi:
            return _with_labels(r, lower=s)  # r always selected; s bounds it below
        if S.lo >= R.hi and rs.lo >= rr.hi:
            return _with_labels(s, lower=r)
    else:
        if R.hi <= S.lo and rr.hi <= rs.lo:
            return _with_labels(r, upper=s)
        if S.hi <= R.lo and rs.hi <= rr.lo:
            return _with_labels(s, upper=r)
    op = ia.max if want_max else ia.min
    D = op(R, S)
    T = op(rr, rs)  # FP selection is exact: no elementary rounding
    abs_u = max(r.abs_bound, s.abs_bound)
    rel_r, rel_s = r.rel_bound, s.rel_bound
    rel = _INF
    if R.lo >= 0 and S.lo >= 0 and rel_r < _INF and rel_s < _INF:
        worst = max(rel_r, rel_s)
        # min additionally needs the perturbation to keep signs: (1 - eps*u) >= 0
        if want_max or _up_mul(worst, ctx.u_max) <= 1.0:
            rel = worst
    fp = max(r.fp_value, s.fp_value) if want_max else min(r.fp_value, s.fp_value)
    tight = ia.intersect(op(_tight_exact(r, ia), _tight_exact(s, ia)), D)
    err = _err_interval(fp, tight, ia)
    return _finish(next(_ids), fp, err, abs_u, rel, D, T, ctx)


def caa_max(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    return _min_max(r, s, ctx, True)


def caa_min(r: Quantity, s: Quantity, ctx: FpContext) -> Quantity:
    return _min_max(r, s, ctx, False)


def caa_neg(r: Quantity, ctx: FpContext) -> Quantity:
    """Negation: exact at every precision, bounds carry over unchanged."""
    ia = ctx.ia
    return Quantity(next(_ids), exact_neg(r.fp_value), ia.neg(r.actual_error),
                    r.abs_bound, r.rel_bound,
                    ia.neg(r.exact_range), ia.neg(r.rounded_range))


# ---------------------------------------------------------------------------
# refinement, labels, clamping
# ---------------------------------------------------------------------------

def refine(q: Quantity, ctx: FpContext) -> Quantity:
    """Improve each bound from the other and tighten ranges; idempotent."""
    return _finish(q.id, q.fp_value, q.actual_error, q.abs_bound, q.rel_bound,
                   q.exact_range, q.rounded_range, ctx,
                   q.lower_label, q.upper_label)


def attach_bounds(q: Quantity, lower: Optional[Quantity] = None,
                  upper: Optional[Quantity] = None) -> Quantity:
    """Label q with quantities known to bound it (caller asserts the ordering
    holds for both the exact and the rounded semantics)."""
    return _with_labels(q, lower=lower, upper=upper)


def clamp_range(q: Quantity, bounds: Interval, ctx: FpContext) -> Quantity:
    """Intersect both ranges with a codomain bound that holds for the exact
    and every rounding evaluation (e.g. [0,1] after a sigmoid)."""
    ia = ctx.ia
    exact = ia.intersect(q.exact_range, bounds)
    rounded = ia.intersect(q.rounded_range, bounds)
    return _finish(q.id, q.fp_value, q.actual_error, q.abs_bound, q.rel_bound,
                   exact, rounded, ctx, q.lower_label, q.upper_label)
