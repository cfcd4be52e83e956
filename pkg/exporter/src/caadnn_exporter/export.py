"""Convert a trained Keras sequential model into the format_version-1 JSON
schema consumed by the analyzer.

Weights are emitted as hex-float strings: the float32 values widened to
binary64 exactly, so the loaded model is bit-identical to the source.
Keras dense kernels are [n_in, n_out] and get transposed to the schema's
[m, n] (y = A x + b); conv kernels are already [kh, kw, cin, cout]
channel-last, matching the schema's row-major layout.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .hexfmt import to_hex

SUPPORTED_ACTIVATIONS = ("relu", "sigmoid", "tanh", "softmax")


class ExportError(Exception):
    pass


@dataclass
class ExportManifest:
    source: str
    layer_map: List[Tuple[str, str]] = field(default_factory=list)
    weight_checksum: str = ""
    path: str = ""

    def to_json(self) -> dict:
        return {"source": self.source,
                "layer_map": [list(m) for m in self.layer_map],
                "weight_checksum": self.weight_checksum,
                "path": self.path}


def _tensor(arr: np.ndarray) -> dict:
    flat = np.asarray(arr, dtype=np.float64).reshape(-1)
    return {"shape": list(arr.shape), "data": [to_hex(v) for v in flat]}


def _activation_name(layer) -> str:
    act = getattr(layer, "activation", None)
    if act is None:
        return "linear"
    return getattr(act, "__name__", str(act))


def _append_activation(layers_json, manifest, source_name, name):
    if name == "linear":
        return
    if name not in SUPPORTED_ACTIVATIONS:
        raise ExportError(f"layer {source_name!r}: unsupported activation {name!r}")
    if name == "softmax":
        layers_json.append({"type": "softmax", "axis": -1})
    else:
        layers_json.append({"type": name})
    manifest.layer_map.append((source_name, name))


def export_model(model, path, name=None) -> ExportManifest:
    """Write the model as schema JSON; returns the export manifest.

    Raises ExportError naming the offending layer for anything outside the
    supported set (dense, conv2d, pooling, batchnorm, flatten,
    relu/sigmoid/tanh/softmax); Dropout is skipped with a warning since it
    is the identity at inference time.
    """
    import tensorflow as tf  # heavy; imported only when exporting
    L = tf.keras.layers

    input_shape = model.input_shape
    if isinstance(input_shape, list):
        raise ExportError("only single-input sequential models are supported")
    input_shape = [int(d) for d in input_shape[1:]]
    layers_json: List[dict] = []
    manifest = ExportManifest(source=name or model.name)

    for layer in model.layers:
        lname = layer.name
        if isinstance(layer, L.InputLayer):
            continue
        if isinstance(layer, L.Dropout):
            warnings.warn(f"layer {lname!r}: dropout skipped (identity at inference)")
            manifest.layer_map.append((lname, "skipped-dropout"))
            continue
        if isinstance(layer, L.Dense):
            kernel, bias = layer.get_weights()
            layers_json.append({"type": "dense",
                                "weights": _tensor(kernel.T),
                                "bias": _tensor(bias)})
            manifest.layer_map.append((lname, "dense"))
            _append_activation(layers_json, manifest, lname, _activation_name(layer))
        elif isinstance(layer, L.Conv2D):
            if layer.padding not in ("valid", "same"):
                raise ExportError(f"layer {lname!r}: unsupported padding {layer.padding!r}")
            if tuple(getattr(layer, "dilation_rate", (1, 1))) != (1, 1):
                raise ExportError(f"layer {lname!r}: dilated convolutions are unsupported")
            kernel, bias = (layer.get_weights() + [np.zeros(layer.filters)])[:2]
            layers_json.append({"type": "conv2d",
                                "kernel": _tensor(kernel),
                                "bias": _tensor(bias),
                                "stride": [int(s) for s in layer.strides],
                                "padding": layer.padding})
            manifest.layer_map.append((lname, "conv2d"))
            _append_activation(layers_json, manifest, lname, _activation_name(layer))
        elif isinstance(layer, (L.MaxPooling2D, L.AveragePooling2D)):
            if layer.padding != "valid":
                raise ExportError(f"layer {lname!r}: only valid padding is supported for pooling")
            kind = "maxpool2d" if isinstance(layer, L.MaxPooling2D) else "avgpool2d"
            layers_json.append({"type": kind,
                                "pool": [int(s) for s in layer.pool_size],
                                "stride": [int(s) for s in layer.strides]})
            manifest.layer_map.append((lname, kind))
        elif isinstance(layer, L.BatchNormalization):
            gamma, beta, mean, var = layer.get_weights()
            layers_json.append({"type": "batchnorm",
                                "gamma": _tensor(gamma), "beta": _tensor(beta),
                                "moving_mean": _tensor(mean),
                                "moving_var": _tensor(var),
                                "epsilon": to_hex(layer.epsilon)})
            manifest.layer_map.append((lname, "batchnorm"))
        elif isinstance(layer, L.Flatten):
            layers_json.append({"type": "flatten"})
            manifest.layer_map.append((lname, "flatten"))
        elif isinstance(layer, L.ReLU):
            layers_json.append({"type": "relu"})
            manifest.layer_map.append((lname, "relu"))
        elif isinstance(layer, L.Softmax):
            layers_json.append({"type": "softmax", "axis": int(layer.axis)})
            manifest.layer_map.append((lname, "softmax"))
        elif isinstance(layer, L.Activation):
            _append_activation(layers_json, manifest, lname, _activation_name(layer))
        else:
            raise ExportError(f"layer {lname!r}: unsupported layer type "
                              f"{type(layer).__name__}")

    doc = {"format_version": 1,
           "name": name or model.name,
           "input_shape": input_shape,
           "layers": layers_json}
    digest = hashlib.sha256()
    for layer in layers_json:
        for key in ("weights", "bias", "kernel", "gamma", "beta",
                    "moving_mean", "moving_var"):
            if key in layer:
                digest.update("\n".join(layer[key]["data"]).encode())
    manifest.weight_checksum = digest.hexdigest()
    manifest.path = str(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    with open(str(path) + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.to_json(), f, indent=1)
        f.write("\n")
    return manifest


def write_input(path, values, shape=None, value_format=None, rng_range=None) -> None:
    """Write an input tensor JSON (integers kept as JSON ints: exact)."""
    flat = np.asarray(values).reshape(-1)
    if value_format == "int":
        data = [int(v) for v in flat]
    else:
        data = [to_hex(float(v)) for v in flat]
    doc = {"shape": list(shape if shape is not None else np.asarray(values).shape),
           "data": data}
    if rng_range is not None:
        doc["range"] = [rng_range[0], rng_range[1]]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")
