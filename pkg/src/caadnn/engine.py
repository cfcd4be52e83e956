"""Layer-by-layer evaluation of a model on CAA tensors.

The evaluated implementation is pinned down exactly, because the certified
bounds are bounds on *this* implementation:

* dot products (dense, conv2d) accumulate left-to-right in index order,
  skipping terms whose weight or input is exactly zero (adding an exact
  FP zero is the identity at every precision, so the skip changes nothing);
* conv2d sums kernel rows, then columns, then input channels; bias last;
  "same" padding pads with exact zeros (skipped terms);
* pooling windows fold row-major; average pooling multiplies the fold by
  the constant 1/(ph*pw);
* batchnorm per channel: y = gamma * ((x - mean) / sqrt(var + eps)) + beta,
  with sqrt(var + eps) computed once per channel;
* softmax is evaluated in max-subtracted stable form by default: the running
  maximum is folded left-to-right, each element is labeled with it as an
  upper bound before subtracting (so ranges clip to (-inf, 0] and the
  element achieving the maximum cancels exactly), and the exponential sum
  folds left-to-right; the plain unstabilized form sits behind a config
  switch for A/B comparison.

Evaluation is sequential and deterministic: identical inputs give identical
bounds and identical reports.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import gmpy2

from . import caa
from .caa import Quantity, mk_const, mk_input
from .fpformat import FpContext
from .interval import DomainError
from .model import (InputTensor, ModelSpec, ShapeError, TensorSpec,
                    infer_shapes)

__all__ = ["CaaTensor", "EngineConfig", "LayerSummary", "ModelEvaluator",
           "run_model", "tensor_from_input"]


@dataclass
class EngineConfig:
    stable_softmax: bool = True


class CaaTensor:
    """Shape plus a flat row-major list of quantities."""

    __slots__ = ("shape", "elems")

    def __init__(self, shape: Sequence[int], elems: List[Quantity]):
        self.shape = tuple(shape)
        n = 1
        for s in self.shape:
            n *= s
        if n != len(elems):
            raise ValueError(f"shape {self.shape} needs {n} elements, got {len(elems)}")
        self.elems = elems

    @property
    def size(self) -> int:
        return len(self.elems)

    def reshape(self, shape: Sequence[int]) -> "CaaTensor":
        return CaaTensor(shape, self.elems)

    def __iter__(self):
        return iter(self.elems)


def tensor_from_input(inp: InputTensor, ctx: FpContext) -> CaaTensor:
    """Wrap an input tensor into quantities (point range unless declared)."""
    elems = []
    ia = ctx.ia
    for i, v in enumerate(inp.tensor.data):
        rng = inp.element_range(i)
        if rng is None:
            elems.append(mk_input(ia.point(_as_scalar(v)), v, ctx))
        else:
            elems.append(mk_input(ia.interval(_as_scalar(rng[0]),
                                              _as_scalar(rng[1])), v, ctx))
    return CaaTensor(inp.tensor.shape, elems)


def _as_scalar(v):
    return v if isinstance(v, (Fraction, float, int)) else float(v)


def _is_exact_zero(q: Quantity) -> bool:
    return q.abs_bound == 0.0 and q.rel_bound == 0.0 and \
        q.exact_range.lo == 0 and q.exact_range.hi == 0


@dataclass
class LayerSummary:
    index: int
    kind: str
    output_shape: Tuple[int, ...]
    max_abs_bound_u: float
    max_rel_bound_u: float  # +inf when any element is unbounded
    unbounded_rel_count: int
    range_lo: object  # mpfr hull of rounded ranges
    range_hi: object
    magnitude_exponent: Optional[int]  # g with sup|values| <= 2^g


def _summarize(index: int, kind: str, t: CaaTensor, ctx: FpContext) -> LayerSummary:
    ia = ctx.ia
    max_abs = 0.0
    max_rel = 0.0
    unbounded = 0
    hull = t.elems[0].rounded_range
    for q in t.elems:
        max_abs = max(max_abs, q.abs_bound)
        if q.rel_bound == float("inf"):
            unbounded += 1
        max_rel = max(max_rel, q.rel_bound)
        hull = ia.hull(hull, q.rounded_range)
    sup = ia.sup_abs(hull)
    if sup == 0 or not gmpy2.is_finite(sup):
        g = None
    else:
        g = gmpy2.get_exp(sup)
        if sup == gmpy2.mpfr(2) ** (g - 1):
            g -= 1
    return LayerSummary(index, kind, t.shape, max_abs, max_rel, unbounded,
                        hull.lo, hull.hi, g)


class ModelEvaluator:
    """Evaluates one model under one context, caching weight quantities so
    repeated runs (directory mode) do not re-wrap constants."""

    def __init__(self, model: ModelSpec, ctx: FpContext,
                 config: Optional[EngineConfig] = None):
        self.model = model
        self.ctx = ctx
        self.config = config or EngineConfig()
        self.shapes = infer_shapes(model)
        self._consts: Dict[Tuple[int, str], List[Quantity]] = {}

    # -- constant caching ------------------------------------------------

    def _tensor_consts(self, layer_index: int, name: str, t: TensorSpec) -> List[Quantity]:
        key = (layer_index, name)
        cached = self._consts.get(key)
        if cached is None:
            cached = self._consts[key] = [mk_const(v, self.ctx) for v in t.data]
        return cached

    # -- layer evaluation --------------------------------------------------

    def _dense(self, i: int, layer, x: CaaTensor) -> CaaTensor:
        ctx = self.ctx
        m, n = layer.weights.shape
        if x.size != n:
            raise ShapeError(i, f"dense expects input length {n}, got {x.size}")
        weights = self._tensor_consts(i, "weights", layer.weights)
        biases = self._tensor_consts(i, "bias", layer.bias)
        xs = x.elems
        out = []
        for row in range(m):
            base = row * n
            acc = None
            for j in range(n):
                w = weights[base + j]
                xj = xs[j]
                if _is_exact_zero(w) or _is_exact_zero(xj):
                    continue  # exact-zero term: skipping equals adding FP zero
                term = caa.caa_mul(w, xj, ctx)
                acc = term if acc is None else caa.caa_add(acc, term, ctx)
            b = biases[row]
            if acc is None:
                acc = b
            elif not _is_exact_zero(b):
                acc = caa.caa_add(acc, b, ctx)
            out.append(acc)
        return CaaTensor((m,), out)

    def _conv2d(self, i: int, layer, x: CaaTensor) -> CaaTensor:
        ctx = self.ctx
        h, w, cin = x.shape
        kh, kw, kcin, cout = layer.kernel.shape
        sh, sw = layer.stride
        kq = self._tensor_consts(i, "kernel", layer.kernel)
        bq = self._tensor_consts(i, "bias", layer.bias)
        oh, ow, _ = self.shapes[i]
        if layer.padding == "same":
            pad_h = max((oh - 1) * sh + kh - h, 0) // 2
            pad_w = max((ow - 1) * sw + kw - w, 0) // 2
        else:
            pad_h = pad_w = 0
        xs = x.elems
        out = []
        for oi in range(oh):
            for oj in range(ow):
                for co in range(cout):
                    acc = None
                    for ki in range(kh):
                        ii = oi * sh - pad_h + ki
                        if ii < 0 or ii >= h:
                            continue  # zero padding: exact-zero products
                        for kj in range(kw):
                            jj = oj * sw - pad_w + kj
                            if jj < 0 or jj >= w:
                                continue
                            for ci in range(cin):
                                kv = kq[((ki * kw + kj) * kcin + ci) * cout + co]
                                xv = xs[(ii * w + jj) * cin + ci]
                                if _is_exact_zero(kv) or _is_exact_zero(xv):
                                    continue
                                term = caa.caa_mul(kv, xv, ctx)
                                acc = term if acc is None else caa.caa_add(acc, term, ctx)
                    b = bq[co]
                    if acc is None:
                        acc = b
                    elif not _is_exact_zero(b):
                        acc = caa.caa_add(acc, b, ctx)
                    out.append(acc)
        return CaaTensor((oh, ow, cout), out)

    def _pool(self, i: int, layer, x: CaaTensor) -> CaaTensor:
        ctx = self.ctx
        h, w, c = x.shape
        ph, pw = layer.pool
        sh, sw = layer.stride
        oh, ow, _ = self.shapes[i]
        xs = x.elems
        avg = layer.kind == "avgpool2d"
        inv = mk_const(Fraction(1, ph * pw), ctx) if avg else None
        out = []
        for oi in range(oh):
            for oj in range(ow):
                for ci in range(c):
                    acc = None
                    for ki in range(ph):
                        for kj in range(pw):
                            v = xs[((oi * sh + ki) * w + (oj * sw + kj)) * c + ci]
                            if acc is None:
                                acc = v
                            elif avg:
                                acc = caa.caa_add(acc, v, ctx)
                            else:
                                acc = caa.caa_max(acc, v, ctx)
                    if avg:
                        acc = caa.caa_mul(acc, inv, ctx)
                    out.append(acc)
        return CaaTensor((oh, ow, c), out)

    def _batchnorm(self, i: int, layer, x: CaaTensor) -> CaaTensor:
        ctx = self.ctx
        c = layer.gamma.shape[0]
        gammas = self._tensor_consts(i, "gamma", layer.gamma)
        betas = self._tensor_consts(i, "beta", layer.beta)
        means = self._tensor_consts(i, "moving_mean", layer.moving_mean)
        eps_q = mk_const(layer.epsilon, ctx)
        denoms = []
        for ch, v in enumerate(self._tensor_consts(i, "moving_var", layer.moving_var)):
            s = caa.caa_add(v, eps_q, ctx)
            if not s.exact_range.lo > 0:
                raise DomainError(
                    f"batchnorm layer {i} channel {ch}: var + epsilon range {s.exact_range} "
                    f"is not strictly positive")
            denoms.append(caa.caa_sqrt(s, ctx))
        out = []
        for flat, q in enumerate(x.elems):
            ch = flat % c
            t = caa.caa_sub(q, means[ch], ctx)
            d = caa.caa_div(t, denoms[ch], ctx)
            g = caa.caa_mul(gammas[ch], d, ctx)
            out.append(caa.caa_add(g, betas[ch], ctx))
        return CaaTensor(x.shape, out)

    def _activation(self, kind: str, x: CaaTensor) -> CaaTensor:
        ctx = self.ctx
        ia = ctx.ia
        if kind == "relu":
            zero = mk_const(0, ctx)
            return CaaTensor(x.shape, [caa.caa_max(q, zero, ctx) for q in x.elems])
        if kind == "tanh":
            return CaaTensor(x.shape, [caa.caa_tanh(q, ctx) for q in x.elems])
        if kind == "sigmoid":
            # 1 / (1 + e^(-x)): both addition terms are >= 1, so it never cancels
            one = mk_const(1, ctx)
            unit = ia.interval(0, 1)
            out = []
            for q in x.elems:
                e = caa.caa_exp(caa.caa_neg(q, ctx), ctx)
                den = caa.caa_add(one, e, ctx)
                out.append(caa.clamp_range(caa.caa_div(one, den, ctx), unit, ctx))
            return CaaTensor(x.shape, out)
        raise ValueError(f"unknown activation {kind!r}")

    def _softmax_lane(self, lane: List[Quantity]) -> List[Quantity]:
        ctx = self.ctx
        unit = ctx.ia.interval(0, 1)
        if self.config.stable_softmax:
            m = lane[0]
            for q in lane[1:]:
                m = caa.caa_max(m, q, ctx)
            exps = []
            for q in lane:
                t = caa.caa_sub(caa.attach_bounds(q, upper=m), m, ctx)
                exps.append(caa.caa_exp(t, ctx))
        else:
            exps = [caa.caa_exp(q, ctx) for q in lane]
        total = exps[0]
        for e in exps[1:]:
            total = caa.caa_add(total, e, ctx)
        return [caa.clamp_range(caa.caa_div(e, total, ctx), unit, ctx)
                for e in exps]

    def _softmax(self, layer, x: CaaTensor) -> CaaTensor:
        axis = layer.axis % len(x.shape)
        n = x.shape[axis]
        inner = 1
        for s in x.shape[axis + 1:]:
            inner *= s
        outer = x.size // (n * inner)
        elems = list(x.elems)
        for o in range(outer):
            for k in range(inner):
                idx = [o * n * inner + j * inner + k for j in range(n)]
                lane = [elems[t] for t in idx]
                for t, q in zip(idx, self._softmax_lane(lane)):
                    elems[t] = q
        return CaaTensor(x.shape, elems)

    # -- driving -----------------------------------------------------------

    def run(self, x: CaaTensor, collect_summaries: bool = True
            ) -> Tuple[CaaTensor, List[LayerSummary]]:
        if x.shape != tuple(self.model.input_shape):
            raise ShapeError(None, f"model expects input shape "
                             f"{tuple(self.model.input_shape)}, got {x.shape}")
        summaries: List[LayerSummary] = []
        for i, layer in enumerate(self.model.layers):
            kind = layer.kind
            if kind == "dense":
                x = self._dense(i, layer, x)
            elif kind == "conv2d":
                x = self._conv2d(i, layer, x)
            elif kind in ("maxpool2d", "avgpool2d"):
                x = self._pool(i, layer, x)
            elif kind == "batchnorm":
                x = self._batchnorm(i, layer, x)
            elif kind in ("relu", "sigmoid", "tanh"):
                x = self._activation(kind, x)
            elif kind == "softmax":
                x = self._softmax(layer, x)
            elif kind == "flatten":
                x = x.reshape(self.shapes[i])
            elif kind == "dropout":  # not in the schema, but be forgiving
                warnings.warn(f"layer {i}: dropout treated as identity at inference")
            else:
                raise ShapeError(i, f"unsupported layer kind {kind!r}")
            if collect_summaries:
                summaries.append(_summarize(i, kind, x, self.ctx))
        return x, summaries


def run_model(model: ModelSpec, x: CaaTensor, ctx: FpContext,
              config: Optional[EngineConfig] = None,
              collect_summaries: bool = True
              ) -> Tuple[CaaTensor, List[LayerSummary]]:
    """Evaluate the model once; see ModelEvaluator for repeated runs."""
    return ModelEvaluator(model, ctx, config).run(x, collect_summaries)
