from __future__ import annotations

import numpy as np

from .errors import RankDeficient
from .search import check_diversity

COND_LIMIT = 1e12


def solve_rows(A: np.ndarray, t: np.ndarray, cond_limit: float = COND_LIMIT):
    """Least squares over double rows; returns (solution, rms residual)."""
    A = np.asarray(A, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if A.shape[0] < A.shape[1]:
        raise RankDeficient(f"{A.shape[0]} equations for {A.shape[1]} unknowns")
    if not np.isfinite(A).all() or not np.isfinite(t).all():
        raise RankDeficient("non-finite coefficients")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_limit:
        raise RankDeficient(f"condition number {cond:.3g} exceeds {cond_limit:.0e}")
    z, *_ = np.linalg.lstsq(A, t, rcond=None)
    r = A @ z - t
    return z, float(np.sqrt(np.mean(r * r)))


def solve_neuron(sets, depth: int | None = None, cond_limit: float = COND_LIMIT):
    """Solve ``A·[w; b] = t`` from convergence sets; returns (weights, bias, residual).

    With ``depth`` the rows use each set's bracket as it stood after that many queries.
    """
    check_diversity(sets)
    A = np.array([cs.row(depth) for cs in sets])
    t = np.array([cs.threshold for cs in sets])
    z, res = solve_rows(A, t, cond_limit)
    return z[:-1], float(z[-1]), res
