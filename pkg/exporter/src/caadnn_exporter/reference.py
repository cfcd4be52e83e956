"""Framework-independent float32 forward pass over an exported model JSON.

Mirrors the analyzer's documented operation order (left-to-right sums,
row-major windows, stable softmax), entirely in numpy float32: the
reference the exporter checks its output files against.
"""

from __future__ import annotations

import json

import numpy as np


def _vals(t) -> np.ndarray:
    return np.array([np.float32(float.fromhex(v)) if isinstance(v, str) else np.float32(v)
                     for v in t["data"]], dtype=np.float32)


def _acc(products: np.ndarray) -> np.float32:
    if products.size == 0:
        return np.float32(0)
    return np.add.accumulate(products, dtype=np.float32)[-1]


def forward_f32(doc: dict, x) -> np.ndarray:
    """Evaluate the model document on a flat input vector, in float32."""
    xs = np.asarray(x, dtype=np.float32).reshape(-1)
    shape = tuple(doc["input_shape"])
    for layer in doc["layers"]:
        kind = layer["type"]
        if kind == "dense":
            m, n = layer["weights"]["shape"]
            w = _vals(layer["weights"]).reshape(m, n)
            b = _vals(layer["bias"])
            out = np.empty(m, dtype=np.float32)
            for i in range(m):
                out[i] = np.float32(_acc(w[i] * xs) + b[i])
            xs, shape = out, (m,)
        elif kind == "conv2d":
            h, wd, cin = shape
            kh, kw, kcin, cout = layer["kernel"]["shape"]
            sh, sw = layer["stride"]
            kq = _vals(layer["kernel"]).reshape(kh, kw, kcin, cout)
            bq = _vals(layer["bias"])
            if layer["padding"] == "same":
                oh, ow = -(-h // sh), -(-wd // sw)
                ph = max((oh - 1) * sh + kh - h, 0) // 2
                pw = max((ow - 1) * sw + kw - wd, 0) // 2
            else:
                oh, ow = (h - kh) // sh + 1, (wd - kw) // sw + 1
                ph = pw = 0
            img = xs.reshape(h, wd, cin)
            out = np.empty((oh, ow, cout), dtype=np.float32)
            for oi in range(oh):
                for oj in range(ow):
                    for co in range(cout):
                        prods = []
                        for ki in range(kh):
                            ii = oi * sh - ph + ki
                            if not 0 <= ii < h:
                                continue
                            for kj in range(kw):
                                jj = oj * sw - pw + kj
                                if not 0 <= jj < wd:
                                    continue
                                for ci in range(cin):
                                    prods.append(np.float32(kq[ki, kj, ci, co] * img[ii, jj, ci]))
                        out[oi, oj, co] = np.float32(
                            _acc(np.array(prods, dtype=np.float32)) + bq[co])
            xs, shape = out.reshape(-1), (oh, ow, cout)
        elif kind in ("maxpool2d", "avgpool2d"):
            h, wd, c = shape
            ph, pw = layer["pool"]
            sh, sw = layer["stride"]
            oh, ow = (h - ph) // sh + 1, (wd - pw) // sw + 1
            img = xs.reshape(h, wd, c)
            inv = np.float32(np.float32(1) / np.float32(ph * pw))
            out = np.empty((oh, ow, c), dtype=np.float32)
            for oi in range(oh):
                for oj in range(ow):
                    for ci in range(c):
                        win = img[oi * sh:oi * sh + ph, oj * sw:oj * sw + pw, ci]
                        if kind == "maxpool2d":
                            out[oi, oj, ci] = win.max()
                        else:
                            out[oi, oj, ci] = np.float32(_acc(win.reshape(-1)) * inv)
            xs, shape = out.reshape(-1), (oh, ow, c)
        elif kind == "batchnorm":
            g = _vals(layer["gamma"])
            be = _vals(layer["beta"])
            mu = _vals(layer["moving_mean"])
            var = _vals(layer["moving_var"])
            eps = np.float32(float.fromhex(layer["epsilon"])
                             if isinstance(layer["epsilon"], str) else layer["epsilon"])
            den = np.sqrt(var + eps, dtype=np.float32)
            c = g.shape[0]
            flat = xs.reshape(-1, c)
            xs = ((flat - mu) / den * g + be).astype(np.float32).reshape(-1)
        elif kind == "relu":
            xs = np.maximum(xs, np.float32(0))
        elif kind == "sigmoid":
            xs = (np.float32(1) / (np.float32(1) + np.exp(-xs, dtype=np.float32))).astype(np.float32)
        elif kind == "tanh":
            xs = np.tanh(xs, dtype=np.float32)
        elif kind == "softmax":
            axis = layer.get("axis", -1) % len(shape)
            n = shape[axis]
            inner = int(np.prod(shape[axis + 1:], dtype=np.int64)) if shape[axis + 1:] else 1
            outer = xs.size // (n * inner)
            out = xs.copy()
            for o in range(outer):
                for k in range(inner):
                    idx = [o * n * inner + j * inner + k for j in range(n)]
                    lane = xs[idx]
                    t = (lane - lane.max()).astype(np.float32)
                    e = np.exp(t, dtype=np.float32)
                    s = _acc(e)
                    out[idx] = (e / s).astype(np.float32)
            xs = out
        elif kind == "flatten":
            shape = (xs.size,)
        else:
            raise ValueError(f"float32 reference: unknown layer {kind!r}")
    return xs


def load_doc(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
