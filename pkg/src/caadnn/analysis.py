"""Turning output bounds into decisions.

Given an externally guaranteed top-1 confidence floor p* > 1/2, a classifier
tolerates an absolute output error margin mu = p* - 1/2 and a relative
margin nu = (2 p* - 1) / (2 p* + 1) without any possibility of an argmax
flip.  Margins are held as exact rationals; the required-precision search
compares them against bound * 2^(1-k) with exact integer arithmetic, and
demands the error stay STRICTLY below the margin (an error exactly equal to
the margin would allow a tie between top-1 and top-2).

A softmax layer turns an absolute input error into a relative output error
at most 11/2 times larger (independent of the vector length), so nu/(11/2)
is the absolute error budget on the softmax input.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional

from .engine import CaaTensor, LayerSummary
from .fpformat import FpContext, parse_pow2
from .model import decimal_str_directed, to_hex_string

__all__ = [
    "SOFTMAX_PROPAGATION_FACTOR",
    "Margin",
    "margins_from_confidence",
    "softmax_input_tolerance",
    "required_precision",
    "summation_precision_hint",
    "StabilityVerdict",
    "argmax_stability",
    "AnalysisReport",
    "build_report",
    "emit_report",
]

SOFTMAX_PROPAGATION_FACTOR = Fraction(11, 2)


def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(x)


@dataclass(frozen=True)
class Margin:
    """Absolute (mu) and relative (nu) error budgets for a confidence floor."""

    p_star: Fraction
    mu: Fraction
    nu: Fraction


def margins_from_confidence(p_star) -> Margin:
    """mu = p* - 1/2 and nu = (2 p* - 1)/(2 p* + 1), exactly.

    Exact rational arithmetic subsumes the conservative-downward-rounding
    requirement: nothing is ever rounded optimistically.
    """
    p = _to_fraction(p_star)
    if not Fraction(1, 2) < p <= 1:
        raise ValueError(f"confidence floor must lie in (1/2, 1], got {p_star!r}")
    return Margin(p, p - Fraction(1, 2), (2 * p - 1) / (2 * p + 1))


def softmax_input_tolerance(margin: Margin) -> Fraction:
    """Absolute error budget on a softmax input implied by the relative
    output margin: nu / (11/2)."""
    return margin.nu / SOFTMAX_PROPAGATION_FACTOR


def _min_k_for(bound: Fraction, margin: Fraction) -> int:
    """Smallest k >= 2 with bound * 2^(1-k) < margin (strict)."""
    if bound == 0:
        return 2
    ratio = bound / margin  # need 2^(k-1) > ratio
    n, d = ratio.numerator, ratio.denominator
    m = max((n // d).bit_length() - 1, 0)
    while (1 << m) * d <= n:
        m += 1
    return max(m + 1, 2)


def required_precision(rel_bound_u, abs_bound_u, margin: Margin,
                       u_max, output_magnitude: float = 1.0) -> Optional[int]:
    """Smallest certified k whose rounding error provably stays inside a margin.

    The candidate must satisfy 2^(1-k) <= u_max (bounds are only certified
    there) and make rel_bound*2^(1-k) < nu or abs_bound*2^(1-k) < mu.
    Returns None when both bounds are unbounded: no precision can be
    certified from this run; re-run with a smaller u_max.

    ``output_magnitude`` does not enter the inequalities; it feeds the
    report's fixed-point-style sufficiency note (see
    summation_precision_hint).
    """
    k_floor = 1 - parse_pow2(u_max)
    candidates = []
    if rel_bound_u is not None and rel_bound_u != math.inf:
        candidates.append(_min_k_for(_to_fraction(rel_bound_u), margin.nu))
    if abs_bound_u is not None and abs_bound_u != math.inf:
        candidates.append(_min_k_for(_to_fraction(abs_bound_u), margin.mu))
    if not candidates:
        return None
    return max(min(candidates), k_floor)


def summation_precision_hint(tolerance: Fraction, magnitude_exponent: int) -> int:
    """FP mantissa bits sufficient for a summation bounded by 2^g to meet an
    absolute tolerance: the bits of the tolerance grid plus g."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    bits = 0
    while Fraction(1, 1 << bits) >= tolerance:
        bits += 1
    return bits + max(magnitude_exponent, 0)


# ---------------------------------------------------------------------------
# argmax stability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    top1_index: int
    top2_index: Optional[int]
    tie_broken: bool = False


def argmax_stability(outputs: CaaTensor, ctx: FpContext) -> StabilityVerdict:
    """Certified argmax stability of a probability vector.

    top1 is the index of the largest emulated value (ties broken toward the
    lowest index, reported).  Stable means: top1's rounded range, widened
    once more by its absolute bound at u_max, sits strictly above every
    other output's widened upper end -- then no certified precision and no
    exact evaluation can flip the argmax.
    """
    ia = ctx.ia
    qs = outputs.elems
    if len(qs) < 2:
        return StabilityVerdict(True, 0, None)
    top1 = 0
    for i, q in enumerate(qs):
        if q.fp_value > qs[top1].fp_value:
            top1 = i
    tie = any(i != top1 and q.fp_value == qs[top1].fp_value
              for i, q in enumerate(qs))
    top2 = None
    for i, q in enumerate(qs):
        if i == top1:
            continue
        if top2 is None or q.fp_value > qs[top2].fp_value:
            top2 = i
    u = ctx.u_max

    def widened(q):
        if q.abs_bound == math.inf:
            return None
        # upward-rounded product: the widening must never be understated
        return ia.widen_abs(q.rounded_range, math.nextafter(q.abs_bound * u, math.inf))

    w1 = widened(qs[top1])
    stable = w1 is not None and not tie
    if stable:
        for i, q in enumerate(qs):
            if i == top1:
                continue
            wi = widened(q)
            if wi is None or not w1.lo > wi.hi:
                stable = False
                break
    return StabilityVerdict(stable, top1, top2, tie)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _bound_json(b: float) -> Optional[str]:
    # bounds are upward-rounded floats; repr round-trips the exact value
    return None if b == math.inf else repr(b)


def _interval_json(iv) -> dict:
    return {"lo": decimal_str_directed(iv.lo, "down"),
            "hi": decimal_str_directed(iv.hi, "up")}


def _frac_json(f: Optional[Fraction]) -> Optional[str]:
    return None if f is None else f"{f.numerator}/{f.denominator}"


@dataclass
class AnalysisReport:
    document: dict

    def to_json(self) -> str:
        return json.dumps(self.document, indent=1) + "\n"


def build_report(model_name: str, outputs: CaaTensor,
                 summaries: List[LayerSummary], ctx: FpContext,
                 margin: Optional[Margin] = None,
                 stable_softmax: bool = True,
                 has_softmax: bool = False,
                 input_name: Optional[str] = None) -> AnalysisReport:
    """Deterministic report document; bounds conservative, inf encoded as
    null plus an "unbounded" flag."""
    verdict = argmax_stability(outputs, ctx) if has_softmax else None
    max_abs = max((q.abs_bound for q in outputs.elems), default=0.0)
    max_rel = max((q.rel_bound for q in outputs.elems), default=0.0)
    required_k = None
    required_k_inequality = None
    required_k_floor = ctx.coarsest_k
    if margin is not None:
        required_k = required_precision(max_rel, max_abs, margin,
                                        2.0 ** ctx.u_max_exponent)
        # the pure inequality-derived k, before the certification floor:
        # surfaced so a floor-dominated verdict is visible, not silent
        required_k_inequality = required_precision(max_rel, max_abs, margin, "2^-1")
    out_entries = []
    for i, q in enumerate(outputs.elems):
        out_entries.append({
            "index": i,
            "fp_value": decimal_str_directed(q.fp_value, "up"),
            "fp_value_hex": to_hex_string(q.fp_value),
            "exact_range": _interval_json(q.exact_range),
            "rounded_range": _interval_json(q.rounded_range),
            "abs_bound_u": _bound_json(q.abs_bound),
            "rel_bound_u": _bound_json(q.rel_bound),
            "unbounded_abs": q.abs_bound == math.inf,
            "unbounded_rel": q.rel_bound == math.inf,
        })
    layers = [{
        "index": s.index,
        "kind": s.kind,
        "output_shape": list(s.output_shape),
        "max_abs_bound_u": _bound_json(s.max_abs_bound_u),
        "max_rel_bound_u": _bound_json(s.max_rel_bound_u),
        "unbounded_rel_count": s.unbounded_rel_count,
        "rounded_hull": {"lo": decimal_str_directed(s.range_lo, "down"),
                         "hi": decimal_str_directed(s.range_hi, "up")},
        "magnitude_exponent": s.magnitude_exponent,
    } for s in summaries]
    doc = {
        "report_version": 1,
        "context": {
            "model": model_name,
            "input": input_name,
            "u_max": f"2^{ctx.u_max_exponent}",
            "emulate_k": ctx.format.k,
            "backend_precision": ctx.ia.precision,
            "elementary_bounds": {k: repr(v) for k, v in
                                  sorted(ctx.elementary_bounds.items())},
            "stable_softmax": stable_softmax,
            "p_star": _frac_json(margin.p_star if margin else None),
            "interval_rounding": "outward (lo rounded down, hi rounded up)",
            "layers": layers,
        },
        "outputs": out_entries,
        "verdicts": {
            "argmax_stable": None if verdict is None else verdict.stable,
            "top1_index": None if verdict is None else verdict.top1_index,
            "top2_index": None if verdict is None else verdict.top2_index,
            "max_abs_bound_u": _bound_json(max_abs),
            "max_rel_bound_u": _bound_json(max_rel),
            "margins": None if margin is None else {
                "mu": _frac_json(margin.mu), "nu": _frac_json(margin.nu)},
            "softmax_input_tolerance": _frac_json(
                softmax_input_tolerance(margin)) if margin else None,
            "required_k": required_k,
            "required_k_inequality": required_k_inequality,
            "certified_floor_k": required_k_floor,
        },
    }
    return AnalysisReport(doc)


def emit_report(report: AnalysisReport, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
