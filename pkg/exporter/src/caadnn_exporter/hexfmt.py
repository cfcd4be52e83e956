"""Compact C-style hex-float strings: the bit-exact wire format for weights."""

import math


def to_hex(x) -> str:
    """float -> shortest hex-float ('0x1p-1' for 0.5)."""
    v = float(x)
    if not math.isfinite(v):
        raise ValueError(f"cannot serialize non-finite weight {x!r}")
    s = v.hex()  # e.g. '0x1.8000000000000p-3'
    mant, _, exp = s.partition("p")
    if "." in mant:
        mant = mant.rstrip("0").rstrip(".")
    return f"{mant}p{exp}"
