"""Emulated k-bit FP evaluation of models, mirroring the engine's pinned
operation order exactly (left-to-right sums, row-major windows, stable
softmax fold).  Used to check that the engine's certified bounds cover the
low-precision evaluation at every certified k."""

from fractions import Fraction

import gmpy2

from caadnn.fpformat import FpFormat
from caadnn.interval import exact_neg


def eval_model_fp(model, inputs, fmt: FpFormat, stable_softmax=True):
    """Evaluate on a flat list of exact input values; returns mpfr list."""
    xs = [fmt.round(v) for v in inputs]
    shape = tuple(model.input_shape)
    for layer in model.layers:
        kind = layer.kind
        if kind == "dense":
            m, n = layer.weights.shape
            w = [fmt.round(v) for v in layer.weights.data]
            b = [fmt.round(v) for v in layer.bias.data]
            out = []
            for i in range(m):
                acc = gmpy2.mpfr(0)
                for j in range(n):
                    acc = fmt.add(acc, fmt.mul(w[i * n + j], xs[j]))
                out.append(fmt.add(acc, b[i]))
            xs, shape = out, (m,)
        elif kind == "conv2d":
            h, wd, cin = shape
            kh, kw, kcin, cout = layer.kernel.shape
            sh, sw = layer.stride
            kq = [fmt.round(v) for v in layer.kernel.data]
            bq = [fmt.round(v) for v in layer.bias.data]
            if layer.padding == "same":
                oh, ow = -(-h // sh), -(-wd // sw)
                ph = max((oh - 1) * sh + kh - h, 0) // 2
                pw = max((ow - 1) * sw + kw - wd, 0) // 2
            else:
                oh, ow = (h - kh) // sh + 1, (wd - kw) // sw + 1
                ph = pw = 0
            out = []
            for oi in range(oh):
                for oj in range(ow):
                    for co in range(cout):
                        acc = gmpy2.mpfr(0)
                        for ki in range(kh):
                            ii = oi * sh - ph + ki
                            if not 0 <= ii < h:
                                continue
                            for kj in range(kw):
                                jj = oj * sw - pw + kj
                                if not 0 <= jj < wd:
                                    continue
                                for ci in range(cin):
                                    p = fmt.mul(kq[((ki * kw + kj) * kcin + ci) * cout + co],
                                                xs[(ii * wd + jj) * cin + ci])
                                    acc = fmt.add(acc, p)
                        out.append(fmt.add(acc, bq[co]))
            xs, shape = out, (oh, ow, cout)
        elif kind in ("maxpool2d", "avgpool2d"):
            h, wd, c = shape
            ph, pw = layer.pool
            sh, sw = layer.stride
            oh, ow = (h - ph) // sh + 1, (wd - pw) // sw + 1
            avg = kind == "avgpool2d"
            inv = fmt.round(Fraction(1, ph * pw)) if avg else None
            out = []
            for oi in range(oh):
                for oj in range(ow):
                    for ci in range(c):
                        acc = None
                        for ki in range(ph):
                            for kj in range(pw):
                                v = xs[((oi * sh + ki) * wd + (oj * sw + kj)) * c + ci]
                                if acc is None:
                                    acc = v
                                elif avg:
                                    acc = fmt.add(acc, v)
                                else:
                                    acc = max(acc, v)
                        out.append(fmt.mul(acc, inv) if avg else acc)
            xs, shape = out, (oh, ow, c)
        elif kind == "batchnorm":
            c = layer.gamma.shape[0]
            g = [fmt.round(v) for v in layer.gamma.data]
            be = [fmt.round(v) for v in layer.beta.data]
            mu = [fmt.round(v) for v in layer.moving_mean.data]
            eps = fmt.round(layer.epsilon)
            den = [fmt.sqrt(fmt.add(fmt.round(v), eps)) for v in layer.moving_var.data]
            out = []
            for i, x in enumerate(xs):
                ch = i % c
                t = fmt.sub(x, mu[ch])
                d = fmt.div(t, den[ch])
                out.append(fmt.add(fmt.mul(g[ch], d), be[ch]))
            xs = out
        elif kind == "relu":
            zero = gmpy2.mpfr(0)
            xs = [max(x, zero) for x in xs]
        elif kind == "sigmoid":
            one = gmpy2.mpfr(1)
            xs = [fmt.div(one, fmt.add(one, fmt.exp(exact_neg(x)))) for x in xs]
        elif kind == "tanh":
            xs = [fmt.tanh(x) for x in xs]
        elif kind == "softmax":
            axis = layer.axis % len(shape)
            n = shape[axis]
            inner = 1
            for s in shape[axis + 1:]:
                inner *= s
            outer = len(xs) // (n * inner)
            out = list(xs)
            for o in range(outer):
                for k in range(inner):
                    idx = [o * n * inner + j * inner + k for j in range(n)]
                    if stable_softmax:
                        mx = xs[idx[0]]
                        for t in idx[1:]:
                            mx = max(mx, xs[t])
                        es = [fmt.exp(fmt.sub(xs[t], mx)) for t in idx]
                    else:
                        es = [fmt.exp(xs[t]) for t in idx]
                    tot = es[0]
                    for e in es[1:]:
                        tot = fmt.add(tot, e)
                    for t, e in zip(idx, es):
                        out[t] = fmt.div(e, tot)
            xs = out
        elif kind == "flatten":
            total = 1
            for s in shape:
                total *= s
            shape = (total,)
        else:
            raise ValueError(f"fp reference: unknown layer {kind}")
    return xs
