"""Kernel backend selection.

The compiled extension is used when it imports; set ``WEIGHTLEAK_PURE_PYTHON=1``
to force the numpy fallback. Both backends produce bit-identical results.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("WEIGHTLEAK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

expf = _impl.expf
dense = _impl.dense
dense_batch = _impl.dense_batch

__all__ = ["BACKEND", "expf", "dense", "dense_batch"]
