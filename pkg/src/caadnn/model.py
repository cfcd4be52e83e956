"""Portable trained-model representation: JSON schema, loader, validator.

Weights travel as C-style hexadecimal FP strings ("0x1.8p-3") so the loader
never perturbs a bit.  Decimal strings are accepted and kept as exact decimal
rationals (they get their rounding charged honestly downstream); plain JSON
numbers are taken as the binary64 value the JSON parser produced and counted
as potentially inexact relative to whatever the producer meant.

Schema (format_version 1), all tensors flat row-major, channel-last:

    {"format_version": 1, "name": str, "input_shape": [..],
     "layers": [
       {"type": "dense", "weights": T[m,n], "bias": T[m]},
       {"type": "conv2d", "kernel": T[kh,kw,cin,cout], "bias": T[cout],
        "stride": [sh,sw], "padding": "valid"|"same"},
       {"type": "maxpool2d"|"avgpool2d", "pool": [ph,pw], "stride": [sh,sw]},
       {"type": "batchnorm", "gamma": T[c], "beta": T[c],
        "moving_mean": T[c], "moving_var": T[c], "epsilon": value},
       {"type": "relu"|"sigmoid"|"tanh"|"flatten"},
       {"type": "softmax", "axis": int}]}

Tensor files: {"shape": [..], "data": [..], "range": [lo,hi] or
"ranges": [[lo,hi], ..]} (default: point ranges at the given values).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Tuple, Union

import gmpy2

__all__ = [
    "ModelError",
    "ModelSchemaError",
    "ShapeError",
    "TensorSpec",
    "LayerSpec",
    "DenseLayer",
    "Conv2dLayer",
    "PoolLayer",
    "BatchNormLayer",
    "ActivationLayer",
    "SoftmaxLayer",
    "FlattenLayer",
    "ModelSpec",
    "InputTensor",
    "load_model",
    "save_model",
    "load_tensor",
    "infer_shapes",
    "to_hex_string",
    "decimal_str_directed",
]

Value = Union[float, Fraction]


class ModelError(Exception):
    pass


class ModelSchemaError(ModelError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ShapeError(ModelError):
    def __init__(self, layer_index: Optional[int], message: str):
        where = "input" if layer_index is None else f"layer {layer_index}"
        super().__init__(f"{where}: {message}")
        self.layer_index = layer_index


# ---------------------------------------------------------------------------
# value parsing / formatting
# ---------------------------------------------------------------------------

def _parse_value(raw, path: str) -> Tuple[Value, bool]:
    """Returns (value, potentially_inexact)."""
    if isinstance(raw, bool):
        raise ModelSchemaError(path, "boolean is not a number")
    if isinstance(raw, (int, float)):
        v = float(raw)
        if not math.isfinite(v):
            raise ModelSchemaError(path, f"non-finite value {raw!r}")
        return v, not isinstance(raw, int)
    if isinstance(raw, str):
        s = raw.strip().lower()
        try:
            if s.startswith(("0x", "-0x", "+0x")):
                v = float.fromhex(s)
                if not math.isfinite(v):
                    raise ValueError("non-finite")
                return v, False
            return Fraction(s), True
        except (ValueError, ZeroDivisionError):
            raise ModelSchemaError(path, f"cannot parse FP value {raw!r}") from None
    raise ModelSchemaError(path, f"expected number or string, got {type(raw).__name__}")


def to_hex_string(x) -> str:
    """Compact C-style hex-float of an exact binary value (float or mpfr)."""
    if isinstance(x, float):
        if x == 0.0:
            return "-0x0p+0" if math.copysign(1.0, x) < 0 else "0x0p+0"
        if not math.isfinite(x):
            raise ValueError("cannot hex-format a non-finite value")
        q = Fraction(x)
    elif isinstance(x, gmpy2.mpfr):
        if x == 0:
            return "-0x0p+0" if gmpy2.is_signed(x) else "0x0p+0"
        if not gmpy2.is_finite(x):
            raise ValueError("cannot hex-format a non-finite value")
        mq = gmpy2.mpq(x)
        q = Fraction(int(mq.numerator), int(mq.denominator))
    elif isinstance(x, Fraction):
        q = x
        if q == 0:
            return "0x0p+0"
        if q.denominator & (q.denominator - 1):
            raise ValueError("not a binary rational")
    else:
        raise TypeError(f"cannot hex-format {type(x).__name__}")
    sign = "-" if q < 0 else ""
    n = abs(q.numerator)
    dt = q.denominator.bit_length() - 1  # denominator is 2**dt
    nb = n.bit_length()
    p = nb - 1 - dt
    fb = nb - 1
    pad = (4 - fb % 4) % 4
    digits = format(n << pad, "x")
    mant = digits[0]
    rest = digits[1:].rstrip("0")
    if rest:
        mant += "." + rest
    return f"{sign}0x{mant}p{p:+d}"


def _value_to_json(v: Value) -> str:
    if isinstance(v, float):
        return to_hex_string(v)
    # exact decimal rational (denominator 2^a * 5^b); re-emit as exact decimal
    n, d = v.numerator, v.denominator
    b = 0
    dd = d
    while dd % 2 == 0:
        dd //= 2
        b += 1
    f = 0
    while dd % 5 == 0:
        dd //= 5
        f += 1
    if dd != 1:
        raise ValueError(f"{v} has no finite decimal expansion")
    scale = max(b, f)
    scaled = n * 10 ** scale // d
    s = str(abs(scaled)).rjust(scale + 1, "0")
    sign = "-" if scaled < 0 else ""
    if scale:
        s = f"{s[:-scale]}.{s[-scale:]}".rstrip("0").rstrip(".")
    return sign + s


def decimal_str_directed(x, direction: str, digits: int = 21) -> str:
    """Decimal string of an mpfr/float with directed rounding ('down'/'up')."""
    if isinstance(x, float) and math.isinf(x) or isinstance(x, gmpy2.mpfr) and gmpy2.is_infinite(x):
        return "-inf" if x < 0 else "inf"
    if isinstance(x, gmpy2.mpfr):
        mq = gmpy2.mpq(x)
        q = Fraction(int(mq.numerator), int(mq.denominator))
    else:
        q = Fraction(x)
    if q == 0:
        return "0"
    n, d = abs(q.numerator), q.denominator
    e10 = len(str(n)) - len(str(d))  # coarse log10 estimate, then adjust
    while n * 10 ** max(0, digits - 1 - e10) // (d * 10 ** max(0, e10 - digits + 1)) >= 10 ** digits:
        e10 += 1
    while n * 10 ** max(0, digits - 1 - e10) // (d * 10 ** max(0, e10 - digits + 1)) < 10 ** (digits - 1):
        e10 -= 1
    num = n * 10 ** max(0, digits - 1 - e10)
    den = d * 10 ** max(0, e10 - digits + 1)
    quo, rem = divmod(num, den)
    negative = q < 0
    round_away = rem != 0 and ((direction == "up") != negative)
    if round_away:
        quo += 1
        if quo == 10 ** digits:
            quo //= 10
            e10 += 1
    s = str(quo)
    mant = s[0] + ("." + s[1:].rstrip("0") if s[1:].rstrip("0") else "")
    sign = "-" if negative else ""
    return f"{sign}{mant}e{e10:+d}"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class TensorSpec:
    shape: Tuple[int, ...]
    data: List[Value]
    inexact_values: int = 0  # count of entries that did not arrive bit-exact

    def __post_init__(self):
        self.shape = tuple(self.shape)
        n = 1
        for s in self.shape:
            n *= s
        if n != len(self.data):
            raise ModelSchemaError(
                "/shape", f"shape {list(self.shape)} implies {n} values, got {len(self.data)}")

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass
class LayerSpec:
    kind = "abstract"


@dataclass
class DenseLayer(LayerSpec):
    kind = "dense"
    weights: TensorSpec = None
    bias: TensorSpec = None


@dataclass
class Conv2dLayer(LayerSpec):
    kind = "conv2d"
    kernel: TensorSpec = None
    bias: TensorSpec = None
    stride: Tuple[int, int] = (1, 1)
    padding: str = "valid"


@dataclass
class PoolLayer(LayerSpec):
    kind = "maxpool2d"  # or avgpool2d
    pool: Tuple[int, int] = (2, 2)
    stride: Tuple[int, int] = (2, 2)


@dataclass
class BatchNormLayer(LayerSpec):
    kind = "batchnorm"
    gamma: TensorSpec = None
    beta: TensorSpec = None
    moving_mean: TensorSpec = None
    moving_var: TensorSpec = None
    epsilon: Value = 0.001


@dataclass
class ActivationLayer(LayerSpec):
    kind = "relu"  # relu | sigmoid | tanh


@dataclass
class SoftmaxLayer(LayerSpec):
    kind = "softmax"
    axis: int = -1


@dataclass
class FlattenLayer(LayerSpec):
    kind = "flatten"


@dataclass
class ModelSpec:
    format_version: int
    name: str
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec] = field(default_factory=list)

    def parameter_count(self) -> int:
        total = 0
        for layer in self.layers:
            for attr in ("weights", "bias", "kernel", "gamma", "beta",
                         "moving_mean", "moving_var"):
                t = getattr(layer, attr, None)
                if isinstance(t, TensorSpec):
                    total += t.size
        return total


@dataclass
class InputTensor:
    tensor: TensorSpec
    range_global: Optional[Tuple[Value, Value]] = None
    ranges: Optional[List[Tuple[Value, Value]]] = None

    def element_range(self, i: int) -> Optional[Tuple[Value, Value]]:
        if self.ranges is not None:
            return self.ranges[i]
        return self.range_global


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------

def _expect(obj, key, path, types, what):
    if key not in obj:
        raise ModelSchemaError(f"{path}/{key}", f"missing required {what}")
    v = obj[key]
    if not isinstance(v, types):
        raise ModelSchemaError(f"{path}/{key}", f"expected {what}")
    return v


def _parse_shape(raw, path) -> Tuple[int, ...]:
    if not isinstance(raw, list) or not raw or not all(
            isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in raw):
        raise ModelSchemaError(path, "shape must be a non-empty list of positive integers")
    return tuple(raw)


def _parse_tensor(raw, path) -> TensorSpec:
    if not isinstance(raw, dict):
        raise ModelSchemaError(path, "expected a tensor object {shape, data}")
    shape = _parse_shape(_expect(raw, "shape", path, list, "shape list"), f"{path}/shape")
    data_raw = _expect(raw, "data", path, list, "data list")
    data = []
    inexact = 0
    for i, v in enumerate(data_raw):
        value, may_be_inexact = _parse_value(v, f"{path}/data/{i}")
        data.append(value)
        inexact += may_be_inexact
    n = 1
    for s in shape:
        n *= s
    if n != len(data):
        raise ModelSchemaError(path, f"shape {list(shape)} implies {n} values, got {len(data)}")
    return TensorSpec(shape, data, inexact)


def _parse_pair(raw, path, what) -> Tuple[int, int]:
    if not isinstance(raw, list) or len(raw) != 2 or not all(
            isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in raw):
        raise ModelSchemaError(path, f"{what} must be a pair of positive integers")
    return (raw[0], raw[1])


def _parse_layer(raw, i: int) -> LayerSpec:
    path = f"/layers/{i}"
    if not isinstance(raw, dict):
        raise ModelSchemaError(path, "expected a layer object")
    kind = _expect(raw, "type", path, str, "layer type string")
    if kind == "dense":
        layer = DenseLayer(weights=_parse_tensor(_expect(raw, "weights", path, dict, "weights tensor"), f"{path}/weights"),
                           bias=_parse_tensor(_expect(raw, "bias", path, dict, "bias tensor"), f"{path}/bias"))
        if len(layer.weights.shape) != 2 or len(layer.bias.shape) != 1:
            raise ModelSchemaError(path, "dense needs weights [m,n] and bias [m]")
        if layer.weights.shape[0] != layer.bias.shape[0]:
            raise ModelSchemaError(path, "dense weights rows and bias length differ")
        return layer
    if kind == "conv2d":
        kernel = _parse_tensor(_expect(raw, "kernel", path, dict, "kernel tensor"), f"{path}/kernel")
        bias = _parse_tensor(_expect(raw, "bias", path, dict, "bias tensor"), f"{path}/bias")
        if len(kernel.shape) != 4 or len(bias.shape) != 1:
            raise ModelSchemaError(path, "conv2d needs kernel [kh,kw,cin,cout] and bias [cout]")
        if kernel.shape[3] != bias.shape[0]:
            raise ModelSchemaError(path, "conv2d kernel out-channels and bias length differ")
        padding = raw.get("padding", "valid")
        if padding not in ("valid", "same"):
            raise ModelSchemaError(f"{path}/padding", f"unknown padding {padding!r}")
        return Conv2dLayer(kernel=kernel, bias=bias,
                           stride=_parse_pair(raw.get("stride", [1, 1]), f"{path}/stride", "stride"),
                           padding=padding)
    if kind in ("maxpool2d", "avgpool2d"):
        pool = _parse_pair(_expect(raw, "pool", path, list, "pool window"), f"{path}/pool", "pool")
        layer = PoolLayer(pool=pool,
                          stride=_parse_pair(raw.get("stride", list(pool)), f"{path}/stride", "stride"))
        layer.kind = kind
        return layer
    if kind == "batchnorm":
        tensors = {}
        for name in ("gamma", "beta", "moving_mean", "moving_var"):
            tensors[name] = _parse_tensor(_expect(raw, name, path, dict, f"{name} tensor"), f"{path}/{name}")
            if len(tensors[name].shape) != 1:
                raise ModelSchemaError(f"{path}/{name}", "batchnorm parameters must be 1-D per-channel")
        eps, _ = _parse_value(_expect(raw, "epsilon", path, (int, float, str), "epsilon"), f"{path}/epsilon")
        if not eps > 0:
            raise ModelSchemaError(f"{path}/epsilon", "epsilon must be positive")
        c = tensors["gamma"].shape[0]
        if any(t.shape[0] != c for t in tensors.values()):
            raise ModelSchemaError(path, "batchnorm parameter lengths differ")
        return BatchNormLayer(epsilon=eps, **tensors)
    if kind in ("relu", "sigmoid", "tanh"):
        layer = ActivationLayer()
        layer.kind = kind
        return layer
    if kind == "softmax":
        axis = raw.get("axis", -1)
        if not isinstance(axis, int) or isinstance(axis, bool):
            raise ModelSchemaError(f"{path}/axis", "axis must be an integer")
        return SoftmaxLayer(axis=axis)
    if kind == "flatten":
        return FlattenLayer()
    raise ModelSchemaError(f"{path}/type", f"unsupported layer type {kind!r}")


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _pool_extent(size: int, window: int, stride: int, padding: str, i: int, what: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if size < window:
        raise ShapeError(i, f"{what}: window {window} exceeds input extent {size}")
    return (size - window) // stride + 1


def infer_shapes(model: ModelSpec) -> List[Tuple[int, ...]]:
    """Output shape after each layer; raises ShapeError on any mismatch."""
    shape = tuple(model.input_shape)
    out: List[Tuple[int, ...]] = []
    for i, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "dense":
            if len(shape) != 1:
                raise ShapeError(i, f"dense expects a 1-D input, got {shape} (flatten first)")
            m, n = layer.weights.shape
            if n != shape[0]:
                raise ShapeError(i, f"dense weights expect input length {n}, got {shape[0]}")
            shape = (m,)
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ShapeError(i, f"conv2d expects [h,w,c] input, got {shape}")
            kh, kw, cin, cout = layer.kernel.shape
            if cin != shape[2]:
                raise ShapeError(i, f"conv2d kernel expects {cin} input channels, got {shape[2]}")
            oh = _pool_extent(shape[0], kh, layer.stride[0], layer.padding, i, "conv2d rows")
            ow = _pool_extent(shape[1], kw, layer.stride[1], layer.padding, i, "conv2d cols")
            shape = (oh, ow, cout)
        elif kind in ("maxpool2d", "avgpool2d"):
            if len(shape) != 3:
                raise ShapeError(i, f"{kind} expects [h,w,c] input, got {shape}")
            oh = _pool_extent(shape[0], layer.pool[0], layer.stride[0], "valid", i, f"{kind} rows")
            ow = _pool_extent(shape[1], layer.pool[1], layer.stride[1], "valid", i, f"{kind} cols")
            shape = (oh, ow, shape[2])
        elif kind == "batchnorm":
            c = layer.gamma.shape[0]
            if shape[-1] != c:
                raise ShapeError(i, f"batchnorm expects {c} channels, got {shape[-1]}")
        elif kind == "softmax":
            axis = layer.axis
            if not -len(shape) <= axis < len(shape):
                raise ShapeError(i, f"softmax axis {axis} out of range for shape {shape}")
        elif kind == "flatten":
            n = 1
            for s in shape:
                n *= s
            shape = (n,)
        elif kind in ("relu", "sigmoid", "tanh"):
            pass
        elif kind == "dropout":
            pass  # identity at inference; not part of the JSON schema
        else:  # pragma: no cover - parser rejects unknown kinds
            raise ShapeError(i, f"unknown layer kind {kind}")
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# load / save
# ---------------------------------------------------------------------------

def load_model(path) -> ModelSpec:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ModelSchemaError("/", "model file must contain a JSON object")
    version = _expect(raw, "format_version", "", int, "format_version integer")
    if version != 1:
        raise ModelSchemaError("/format_version", f"unsupported format_version {version}")
    name = _expect(raw, "name", "", str, "name string")
    input_shape = _parse_shape(_expect(raw, "input_shape", "", list, "input_shape"), "/input_shape")
    layers_raw = _expect(raw, "layers", "", list, "layers list")
    layers = [_parse_layer(layer, i) for i, layer in enumerate(layers_raw)]
    softmax_positions = [i for i, l in enumerate(layers) if l.kind == "softmax"]
    if len(softmax_positions) > 1:
        raise ModelSchemaError("/layers", "at most one softmax layer is allowed")
    if softmax_positions and softmax_positions[0] != len(layers) - 1:
        raise ModelSchemaError("/layers", "softmax must be the final layer")
    model = ModelSpec(version, name, input_shape, layers)
    infer_shapes(model)  # raises ShapeError naming the offending layer
    inexact = sum(
        getattr(layer, attr).inexact_values
        for layer in layers
        for attr in ("weights", "bias", "kernel", "gamma", "beta", "moving_mean", "moving_var")
        if isinstance(getattr(layer, attr, None), TensorSpec))
    if inexact:
        warnings.warn(
            f"model {name!r}: {inexact} weight(s) were not given as hex-floats "
            f"and may not be bit-exact reproductions of the source",
            stacklevel=2)
    return model


def _tensor_to_json(t: TensorSpec) -> dict:
    return {"shape": list(t.shape), "data": [_value_to_json(v) for v in t.data]}


def _layer_to_json(layer: LayerSpec) -> dict:
    kind = layer.kind
    if kind == "dense":
        return {"type": kind, "weights": _tensor_to_json(layer.weights),
                "bias": _tensor_to_json(layer.bias)}
    if kind == "conv2d":
        return {"type": kind, "kernel": _tensor_to_json(layer.kernel),
                "bias": _tensor_to_json(layer.bias), "stride": list(layer.stride),
                "padding": layer.padding}
    if kind in ("maxpool2d", "avgpool2d"):
        return {"type": kind, "pool": list(layer.pool), "stride": list(layer.stride)}
    if kind == "batchnorm":
        return {"type": kind, "gamma": _tensor_to_json(layer.gamma),
                "beta": _tensor_to_json(layer.beta),
                "moving_mean": _tensor_to_json(layer.moving_mean),
                "moving_var": _tensor_to_json(layer.moving_var),
                "epsilon": _value_to_json(layer.epsilon)}
    if kind == "softmax":
        return {"type": kind, "axis": layer.axis}
    return {"type": kind}


def save_model(model: ModelSpec, path) -> None:
    doc = {"format_version": model.format_version, "name": model.name,
           "input_shape": list(model.input_shape),
           "layers": [_layer_to_json(l) for l in model.layers]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def _parse_range(raw, path) -> Tuple[Value, Value]:
    if not isinstance(raw, list) or len(raw) != 2:
        raise ModelSchemaError(path, "range must be [lo, hi]")
    lo, _ = _parse_value(raw[0], f"{path}/0")
    hi, _ = _parse_value(raw[1], f"{path}/1")
    if not lo <= hi:
        raise ModelSchemaError(path, f"range lower end {raw[0]} exceeds upper end {raw[1]}")
    return lo, hi


def load_tensor(path) -> InputTensor:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ModelSchemaError("/", "tensor file must contain a JSON object")
    tensor = _parse_tensor(raw, "")
    if "range" in raw and "ranges" in raw:
        raise ModelSchemaError("/range", "give either a global range or per-element ranges")
    range_global = _parse_range(raw["range"], "/range") if "range" in raw else None
    ranges = None
    if "ranges" in raw:
        rr = raw["ranges"]
        if not isinstance(rr, list) or len(rr) != tensor.size:
            raise ModelSchemaError("/ranges", f"need exactly {tensor.size} per-element ranges")
        ranges = [_parse_range(r, f"/ranges/{i}") for i, r in enumerate(rr)]
    return InputTensor(tensor, range_global, ranges)
