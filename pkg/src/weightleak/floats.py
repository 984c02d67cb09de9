"""IEEE-754 binary32 helpers: bit views, total ordering keys and ulp stepping."""
from __future__ import annotations

import struct

import numpy as np

f32 = np.float32

POS_INF_BITS = 0x7F800000
NEG_INF_BITS = 0xFF800000
KEY_MIN = -POS_INF_BITS - 1  # key of -inf
KEY_MAX = POS_INF_BITS  # key of +inf


def to_bits(x) -> int:
    return struct.unpack("<I", struct.pack("<f", float(x)))[0]


def from_bits(b: int) -> np.float32:
    return np.frombuffer(struct.pack("<I", b & 0xFFFFFFFF), dtype=np.float32)[0]


def to_key(x) -> int:
    """Map a non-NaN float32 onto a signed integer preserving order.

    -0.0 and +0.0 get distinct adjacent keys (-1 and 0).
    """
    b = to_bits(x)
    if b & 0x80000000:
        return -(b & 0x7FFFFFFF) - 1
    return b


def from_key(k: int) -> np.float32:
    if k < 0:
        return from_bits((-k - 1) | 0x80000000)
    return from_bits(k)


def keys_of(xs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`to_key` for a float32 array (NaN lanes are meaningless)."""
    b = np.asarray(xs, dtype=np.float32).view(np.uint32).astype(np.int64)
    neg = (b & 0x80000000) != 0
    return np.where(neg, -(b & 0x7FFFFFFF) - 1, b)


def floats_of(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    b = np.where(k < 0, (-k - 1) | 0x80000000, k).astype(np.uint32)
    return b.view(np.float32)


def next_up(x) -> np.float32:
    with np.errstate(over="ignore"):
        return np.nextafter(f32(x), f32(np.inf))


def next_down(x) -> np.float32:
    with np.errstate(over="ignore"):
        return np.nextafter(f32(x), f32(-np.inf))


def ulps_between(a, b) -> int:
    return to_key(b) - to_key(a)


def midpoint(lo, hi) -> np.float32 | None:
    """Float32 point strictly between ``lo`` and ``hi``, or None when they are adjacent.

    Uses the correctly rounded arithmetic mean; if that lands on an endpoint the
    midpoint of the ordered bit patterns is used instead.
    """
    lo, hi = f32(lo), f32(hi)
    m = f32(0.5 * (float(lo) + float(hi)))
    klo, khi = to_key(lo), to_key(hi)
    if klo > khi:
        klo, khi = khi, klo
    km = to_key(m)
    if klo < km < khi:
        return m
    if khi - klo <= 1:
        return None
    return from_key((klo + khi) // 2)


def hex_bits(x) -> str:
    return f"{to_bits(x):08x}"


def parse_hex_bits(s: str) -> np.float32:
    return from_bits(int(s, 16))
