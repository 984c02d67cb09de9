"""Deeper layers: inverting solved layers and grid-scanning for class changes."""
from __future__ import annotations

import math

import numpy as np

from ..floats import f32, midpoint
from ..victim import ActivationKind
from .errors import NoClassChange, SignAmbiguous, TargetUnreachable
from .observable import observable_map
from .oracle import Oracle
from .search import ConvergenceSet, check_diversity, locked_values
from .solve import solve_rows


def act64(act: ActivationKind, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(over="ignore"):
        if act is ActivationKind.EXPONENTIAL:
            return np.exp(z)
        if act is ActivationKind.SIGMOID:
            return 1.0 / (1.0 + np.exp(-z))
        if act is ActivationKind.TANH:
            return np.tanh(z)
        return np.maximum(z, 0.0)


def inverse_act64(act: ActivationKind, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    dom = act.invertible_on
    bad = [float(v) for v in y if not dom.contains(float(v))]
    if bad:
        raise TargetUnreachable(f"{act.value} cannot output {bad[0]!r}; its range is {act.output_range}")
    if act is ActivationKind.EXPONENTIAL:
        return np.log(y)
    if act is ActivationKind.SIGMOID:
        return np.log(y) - np.log1p(-y)
    if act is ActivationKind.TANH:
        return np.arctanh(y)
    return y.copy()


def forward64(solved, x) -> np.ndarray:
    """Double-precision forward pass through recovered layers."""
    h = np.asarray(x, dtype=np.float64)
    for rec in solved:
        h = act64(rec.activation, rec.weights @ h + rec.biases)
    return h


def unwrap_layers(solved, target, *, rtol: float = 1e-9) -> np.ndarray:
    """Find an input whose forward pass through ``solved`` gives ``target``.

    Each layer is undone by its inverse activation followed by a minimum-norm
    least-squares solve of ``W·x = z - b``. A target off the image of ``W`` or
    outside the activation's range raises TargetUnreachable.
    """
    y = np.asarray(target, dtype=np.float64)
    for rec in reversed(list(solved)):
        if y.shape != (rec.weights.shape[0],):
            raise ValueError(f"target length {y.shape} does not match layer width {rec.weights.shape[0]}")
        rhs = inverse_act64(rec.activation, y) - rec.biases
        x, *_ = np.linalg.lstsq(rec.weights, rhs, rcond=None)
        miss = np.abs(rec.weights @ x - rhs).max()
        if miss > rtol * (1.0 + np.abs(rhs).max()):
            raise TargetUnreachable(f"target is off the image of layer {rec.layer} (miss {miss:.3g})")
        y = x
    return y


def grid_search_deeper(o: Oracle, solved, layer_idx: int, neuron: int, resolution: float, span: float, *,
                       n_scans: int = 1, seed: int = 0, refine_depth: int = 40,
                       phase: str = "grid") -> list[ConvergenceSet]:
    """Scan one network input from ``+span`` to ``-span`` watching a deeper neuron.

    Every change of the neuron's observation between neighbouring grid points
    is bisected down to adjacent floats (or ``refine_depth`` queries). The
    equation row of each set is the solved layers' double-precision output at
    the crossing. A set is sign-known only when a single boundary of the
    observable map separates the two observations; mirrored regions leave the
    sign of the threshold open.
    """
    if len(solved) != layer_idx:
        raise ValueError(f"need the {layer_idx} layers below layer {layer_idx} solved")
    omap = observable_map(o.arch[layer_idx].activation)
    n = o.n_inputs
    steps = int(math.floor(2 * span / resolution))
    if steps < 1:
        raise NoClassChange("resolution wider than the scanned span")
    sets = []
    for s in range(n_scans):
        d = s % n
        x = locked_values(seed, layer_idx, neuron, s, n)

        def sig_at(v):
            x[d] = v
            return o.query(x, phase).signature(layer_idx, neuron)

        grid = [f32(span - k * resolution) for k in range(steps + 1)]
        sigs = [sig_at(v) for v in grid]
        for k in range(steps):
            if sigs[k] == sigs[k + 1]:
                continue
            a, b, sa, sb = grid[k], grid[k + 1], sigs[k], sigs[k + 1]
            for _ in range(refine_depth):
                m = midpoint(a, b)
                if m is None:
                    break
                sm = sig_at(m)
                if sm == sa:
                    a = m
                else:
                    b, sb = m, sm
            cands = tuple(sorted(set(omap.boundaries_between(sa, sb))))
            if not cands:
                continue
            xa = x.copy()
            xa[d] = a
            xm = x.astype(np.float64)
            xm[d] = 0.5 * (float(a) + float(b))
            hidden = forward64(solved, xm)
            sets.append(ConvergenceSet(xa, d, a, b, cands, (layer_idx, neuron), len(cands) == 1,
                                       trail=[(a, b)], hidden=hidden))
    if not sets:
        raise NoClassChange(f"layer {layer_idx} neuron {neuron}: no class change in {n_scans} scan(s)")
    return sets


def solve_deeper(sets, n_unknowns: int):
    """Solve a deeper neuron from sign-known sets; declines when too few exist."""
    known = [cs for cs in sets if cs.sign_known]
    if len(known) < n_unknowns:
        raise SignAmbiguous(f"{len(known)} sign-known sets for {n_unknowns} unknowns "
                            f"({len(sets) - len(known)} signless); declining to solve")
    check_diversity(known)
    A = np.array([cs.row() for cs in known])
    t = np.array([cs.threshold for cs in known])
    z, res = solve_rows(A, t)
    return z[:-1], float(z[-1]), res
