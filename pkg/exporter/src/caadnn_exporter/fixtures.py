"""Trains and ships the fixture networks used by the analyzer's test suite.

Everything is seeded; the resulting JSON files are committed to the
repository so the analyzer's own suite never needs this toolchain.

* digits: a ~0.7M-parameter MLP (784 -> 886 relu -> 8 relu -> 10 softmax)
  trained on 28x28 upsamplings of the scikit-learn handwritten digits,
  magnitude-pruned and fine-tuned so the certified error bounds of the
  analysis stay tight, with the pixel-scaling constant folded into the
  first layer (the shipped model takes raw integer pixels in [0, 240]);
* pendulum: a tiny 2-input tanh MLP fit to a pendulum-style energy
  function, analyzed over the full input box [-6, 6]^2;
* micro_*: small seeded models covering conv/pool/batchnorm paths.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .export import export_model, write_input

DIGITS_HIDDEN = (886, 8)
DIGITS_PRUNE = (24, 48)  # nonzero input weights kept per unit, layers 1 and 2
PIXEL_MAX = 240


def _tf():
    import tensorflow as tf
    return tf


def _digits_data():
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split
    raw = load_digits()
    up = np.kron(raw.images, np.ones((3, 3)))          # 8x8 -> 24x24
    up = np.pad(up, ((0, 0), (2, 2), (2, 2)))          # -> 28x28
    pix = np.rint(up * 15).astype(np.int64)            # integers in [0, 240]
    x = (pix.reshape(-1, 784) / PIXEL_MAX).astype("float32")
    return train_test_split(x, raw.target, pix.reshape(-1, 784),
                            test_size=0.25, random_state=17, stratify=raw.target)


def _topk_mask(kernel: np.ndarray, keep: int) -> np.ndarray:
    """Per-unit (column) mask keeping the `keep` largest-magnitude weights."""
    mask = np.zeros_like(kernel)
    for j in range(kernel.shape[1]):
        idx = np.argsort(-np.abs(kernel[:, j]))[:keep]
        mask[idx, j] = 1.0
    return mask


def make_digits_fixture(out_dir, seed=7, epochs=30, verbose=0):
    tf = _tf()
    tf.keras.utils.set_random_seed(seed)
    x_tr, x_te, y_tr, y_te, pix_tr, pix_te = _digits_data()
    h1, h2 = DIGITS_HIDDEN
    reg = tf.keras.regularizers.L2(1e-5)
    model = tf.keras.Sequential([
        tf.keras.Input((784,)),
        tf.keras.layers.Dense(h1, activation="relu", kernel_regularizer=reg),
        tf.keras.layers.Dense(h2, activation="relu", kernel_regularizer=reg),
        tf.keras.layers.Dense(10, activation="softmax"),
    ])
    model.compile(optimizer=tf.keras.optimizers.Adam(1e-3),
                  loss="sparse_categorical_crossentropy", metrics=["accuracy"])
    model.fit(x_tr, y_tr, epochs=epochs, batch_size=64, verbose=verbose)

    # magnitude-prune the two big layers, then fine-tune under fixed masks
    k1, b1 = model.layers[0].get_weights()
    k2, b2 = model.layers[1].get_weights()
    m1 = _topk_mask(k1, DIGITS_PRUNE[0])
    m2 = _topk_mask(k2, DIGITS_PRUNE[1])

    class FixedMask(tf.keras.constraints.Constraint):
        def __init__(self, mask):
            self.mask = tf.constant(mask, dtype="float32")

        def __call__(self, w):
            return w * self.mask

    pruned = tf.keras.Sequential([
        tf.keras.Input((784,)),
        tf.keras.layers.Dense(h1, activation="relu", kernel_constraint=FixedMask(m1)),
        tf.keras.layers.Dense(h2, activation="relu", kernel_constraint=FixedMask(m2)),
        tf.keras.layers.Dense(10, activation="softmax"),
    ])
    pruned.layers[0].set_weights([k1 * m1, b1])
    pruned.layers[1].set_weights([k2 * m2, b2])
    pruned.layers[2].set_weights(model.layers[2].get_weights())
    pruned.compile(optimizer=tf.keras.optimizers.Adam(5e-4),
                   loss="sparse_categorical_crossentropy", metrics=["accuracy"])
    pruned.fit(x_tr, y_tr, epochs=epochs + 10, batch_size=64, verbose=verbose)
    _, acc = pruned.evaluate(x_te, y_te, verbose=0)

    # fold the 1/PIXEL_MAX input scaling into the first kernel: the shipped
    # model consumes raw integer pixels, which are exact FP data
    k1p, b1p = pruned.layers[0].get_weights()
    shipped = tf.keras.Sequential([
        tf.keras.Input((784,)),
        tf.keras.layers.Dense(h1, activation="relu"),
        tf.keras.layers.Dense(h2, activation="relu"),
        tf.keras.layers.Dense(10, activation="softmax"),
    ])
    shipped.layers[0].set_weights([(k1p / PIXEL_MAX).astype("float32"), b1p])
    shipped.layers[1].set_weights(pruned.layers[1].get_weights())
    shipped.layers[2].set_weights(pruned.layers[2].get_weights())

    os.makedirs(out_dir, exist_ok=True)
    manifest = export_model(shipped, os.path.join(out_dir, "digits_mlp.json"),
                            name="digits-mlp")

    # one canonical test image per class: the most confidently correct one
    w1, bb1 = shipped.layers[0].get_weights()
    w2, bb2 = shipped.layers[1].get_weights()
    w3, bb3 = shipped.layers[2].get_weights()
    hid1 = np.maximum(pix_te.astype("float32") @ w1 + bb1, 0)
    hid2 = np.maximum(hid1 @ w2 + bb2, 0)
    logits = hid2 @ w3 + bb3
    chosen = {}
    for i, y in enumerate(y_te):
        row = logits[i]
        pred = int(np.argmax(row))
        if pred != y:
            continue
        gap = row[pred] - np.partition(row, -2)[-2]
        if y not in chosen or gap > chosen[y][0]:
            chosen[y] = (gap, i)
    for y, (gap, i) in sorted(chosen.items()):
        write_input(os.path.join(out_dir, f"digits_input_c{y}.json"),
                    pix_te[i], shape=(784,), value_format="int")
    best = max(chosen.items(), key=lambda kv: kv[1][0])
    write_input(os.path.join(out_dir, "digits_input.json"),
                pix_te[best[1][1]], shape=(784,), value_format="int")
    return {"accuracy": float(acc), "parameters": int(shipped.count_params()),
            "classes_with_canonical_image": sorted(int(y) for y in chosen),
            "best_class": int(best[0]), "checksum": manifest.weight_checksum}


def make_pendulum_fixture(out_dir, seed=3, epochs=400, verbose=0):
    tf = _tf()
    tf.keras.utils.set_random_seed(seed)
    theta, omega = np.meshgrid(np.linspace(-6, 6, 61), np.linspace(-6, 6, 61))
    x = np.stack([theta.reshape(-1), omega.reshape(-1)], axis=1).astype("float32")
    # pendulum-style energy, scaled into tanh's range
    v = (1 - np.cos(theta)) / 2 + omega ** 2 / 72
    y = (0.9 * v / v.max()).reshape(-1, 1).astype("float32")
    model = tf.keras.Sequential([
        tf.keras.Input((2,)),
        tf.keras.layers.Dense(16, activation="tanh"),
        tf.keras.layers.Dense(1, activation="tanh"),
    ])
    model.compile(optimizer=tf.keras.optimizers.Adam(5e-3), loss="mse")
    model.fit(x, y, epochs=epochs, batch_size=256, verbose=verbose)
    mse = float(model.evaluate(x, y, verbose=0))
    os.makedirs(out_dir, exist_ok=True)
    manifest = export_model(model, os.path.join(out_dir, "pendulum_mlp.json"),
                            name="pendulum-mlp")
    write_input(os.path.join(out_dir, "pendulum_input.json"),
                [0.0, 0.0], shape=(2,), rng_range=(-6, 6))
    return {"mse": mse, "parameters": int(model.count_params()),
            "checksum": manifest.weight_checksum}


def make_micro_fixtures(out_dir, seed=11):
    tf = _tf()
    tf.keras.utils.set_random_seed(seed)
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    produced = {}

    ident = tf.keras.Sequential([tf.keras.Input((3,)), tf.keras.layers.Dense(3)])
    ident.layers[0].set_weights([np.eye(3, dtype="float32"),
                                 np.zeros(3, dtype="float32")])
    produced["micro_identity"] = export_model(
        ident, os.path.join(out_dir, "micro_identity.json"),
        name="micro-identity").weight_checksum
    write_input(os.path.join(out_dir, "micro_identity_input.json"),
                rng.uniform(-2, 2, 3).astype("float32"), shape=(3,))

    mlp = tf.keras.Sequential([
        tf.keras.Input((4,)),
        tf.keras.layers.Dense(5, activation="relu"),
        tf.keras.layers.Dense(3, activation="softmax")])
    produced["micro_mlp"] = export_model(
        mlp, os.path.join(out_dir, "micro_mlp.json"),
        name="micro-mlp").weight_checksum
    write_input(os.path.join(out_dir, "micro_mlp_input.json"),
                rng.uniform(-1, 1, 4).astype("float32"), shape=(4,))

    conv = tf.keras.Sequential([
        tf.keras.Input((6, 6, 1)),
        tf.keras.layers.Conv2D(2, 3, padding="same"),
        tf.keras.layers.BatchNormalization(),
        tf.keras.layers.Activation("relu"),
        tf.keras.layers.MaxPooling2D(2),
        tf.keras.layers.Flatten(),
        tf.keras.layers.Dense(3, activation="softmax")])
    bn = conv.layers[1]
    bn.set_weights([rng.uniform(0.5, 1.5, 2).astype("float32"),
                    rng.uniform(-0.3, 0.3, 2).astype("float32"),
                    rng.uniform(-0.5, 0.5, 2).astype("float32"),
                    rng.uniform(0.5, 2.0, 2).astype("float32")])
    produced["micro_conv"] = export_model(
        conv, os.path.join(out_dir, "micro_conv.json"),
        name="micro-conv").weight_checksum
    write_input(os.path.join(out_dir, "micro_conv_input.json"),
                rng.uniform(-1, 1, 36).astype("float32"), shape=(6, 6, 1))
    return produced


def make_fixtures(out_dir, quick=False, verbose=0):
    """All fixtures; returns a summary dict (also written alongside)."""
    summary = {
        "digits": make_digits_fixture(out_dir, verbose=verbose,
                                      epochs=6 if quick else 30),
        "pendulum": make_pendulum_fixture(out_dir, verbose=verbose,
                                          epochs=60 if quick else 400),
        "micro": make_micro_fixtures(out_dir),
        "seeds": {"digits": 7, "pendulum": 3, "micro": 11},
    }
    with open(os.path.join(out_dir, "fixtures_manifest.json"), "w") as f:
        json.dump(summary, f, indent=1)
        f.write("\n")
    return summary
