"""Pure numpy versions of the compiled kernels (bit-identical results)."""
from __future__ import annotations

import numpy as np

from .mathref import expf_batch


def expf(x):
    return expf_batch(x)


def dense(w, b, x):
    w = np.asarray(w, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if w.shape[1] != x.shape[0] or w.shape[0] != len(b):
        raise ValueError("shape mismatch")
    acc = np.zeros(w.shape[0], dtype=np.float32)
    with np.errstate(all="ignore"):
        for j in range(w.shape[1]):
            acc = acc + x[j] * w[:, j]
        return acc + np.asarray(b, dtype=np.float32)


def dense_batch(w, b, xs):
    w = np.asarray(w, dtype=np.float32)
    xs = np.asarray(xs, dtype=np.float32)
    if xs.ndim != 2 or w.shape[1] != xs.shape[1] or w.shape[0] != len(b):
        raise ValueError("shape mismatch")
    acc = np.zeros((xs.shape[0], w.shape[0]), dtype=np.float32)
    with np.errstate(all="ignore"):
        for j in range(w.shape[1]):
            acc = acc + xs[:, j, None] * w[None, :, j]
        return acc + np.asarray(b, dtype=np.float32)[None, :]
