"""Threshold binary search and convergence-set collection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..floats import f32, midpoint
from .calibrate import CalibrationResult, require_reachable
from .errors import InsufficientThresholdDiversity, LostBracket, Unreachable
from .observable import BOTTOM, TOP, ObservableMap, observable_map
from .oracle import Oracle


@dataclass
class ConvergenceSet:
    """Input vector pinned (within the bracket) to one threshold of one neuron.

    ``lo`` is the searched coordinate's value on the unsaturated side and
    ``hi`` on the saturated side; ``trail`` holds the bracket after each query.
    """

    inputs: np.ndarray
    dyn_index: int
    lo: np.float32
    hi: np.float32
    thresholds: tuple[float, ...]
    neuron: tuple[int, int]
    sign_known: bool = True
    side: int = 0
    certified: bool = False
    trail: list = field(default_factory=list, repr=False)
    hidden: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return max(len(self.trail) - 1, 0)

    @property
    def threshold(self) -> float:
        if not self.sign_known:
            raise ValueError("threshold sign unknown for this set")
        return self.thresholds[0]

    @property
    def ulp_tight(self) -> bool:
        return midpoint(self.lo, self.hi) is None

    def bracket_at(self, depth: int) -> tuple[np.float32, np.float32]:
        if not self.trail:
            return self.lo, self.hi
        return self.trail[min(depth, len(self.trail) - 1)]

    def row(self, depth: int | None = None) -> np.ndarray:
        lo, hi = (self.lo, self.hi) if depth is None else self.bracket_at(depth)
        base = self.inputs if self.hidden is None else self.hidden
        r = np.append(np.asarray(base, dtype=np.float64), 1.0)
        if self.hidden is None:
            r[self.dyn_index] = 0.5 * (float(lo) + float(hi))
        return r

    def point(self, v) -> np.ndarray:
        x = np.array(self.inputs, dtype=np.float32)
        x[self.dyn_index] = v
        return x


def binary_search_threshold(o: Oracle, neuron: int, dyn_index: int, locked, start, max_depth: int, *,
                            side: int, base: float = 10.0, layer: int = 0,
                            omap: ObservableMap | None = None, phase: str = "search") -> ConvergenceSet:
    """Bisect coordinate ``dyn_index`` between 0 and ``start`` onto the ``side`` threshold.

    Every query counts toward ``max_depth``. The first confirms that ``start``
    saturates; if it does not, the start is pushed out by ``base`` and the old
    start becomes the unsaturated end. Stops when the bracket is ulp-tight.
    """
    omap = omap or observable_map(o.arch[layer].activation)
    known = {p[2] for p in omap.parts}
    x = np.array(locked, dtype=np.float32)
    u, s = f32(0.0), f32(start)
    trail = [(u, s)]
    seen_sat = seen_unsat = False

    def probe(v) -> bool:
        x[dyn_index] = v
        sig = o.query(x, phase).signature(layer, neuron)
        if sig not in known:
            raise LostBracket(f"neuron {neuron}: unknown observation {sig}")
        got = omap.side_of(sig)
        if got == -side:
            raise LostBracket(f"neuron {neuron}: opposite saturation at input {dyn_index} = {float(v)!r}")
        return got == side

    q = 0
    while q < max_depth and not seen_sat:
        q += 1
        if probe(s):
            seen_sat = True
        else:
            u, seen_unsat = s, True
            with np.errstate(over="ignore"):
                s = f32(float(s) * base)
            if not np.isfinite(s):
                raise Unreachable(f"neuron {neuron}: input {dyn_index} never saturates")
        trail.append((u, s))
    while q < max_depth:
        m = midpoint(u, s)
        if m is None:
            break
        q += 1
        if probe(m):
            s = m
        else:
            u, seen_unsat = m, True
        trail.append((u, s))
    x[dyn_index] = u
    return ConvergenceSet(x, dyn_index, u, s, (omap.threshold(side).value,), (layer, neuron),
                          side=side, certified=seen_sat and seen_unsat, trail=trail)


def verify_certificate(o: Oracle, cs: ConvergenceSet, phase: str = "verify") -> bool:
    """Re-query both bracket ends: the low end must not saturate, the high end must."""
    layer, j = cs.neuron
    omap = observable_map(o.arch[layer].activation)
    lo = omap.side_of(o.query(cs.point(cs.lo), phase).signature(layer, j))
    hi = omap.side_of(o.query(cs.point(cs.hi), phase).signature(layer, j))
    return lo != cs.side and hi == cs.side


def flip_exponent(omap: ObservableMap, side: int, base: float) -> int:
    """Powers of ``base`` needed to go from one saturation threshold to the other."""
    ratio = abs(omap.threshold(-side).value) / abs(omap.threshold(side).value)
    m = 0
    while base ** m < ratio:
        m += 1
    return m


def set_plan(reachable, s: int) -> tuple[int, bool]:
    """Dynamic input and whether to search the flipped (negative) direction for set ``s``."""
    r = len(reachable)
    return int(reachable[s % r]), (s % r + s // r) % 2 == 1


def locked_values(seed: int, layer: int, neuron: int, s: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, layer, neuron, s]).uniform(-1, 1, n).astype(np.float32)


def collect_convergence_sets(o: Oracle, neuron: int, n_sets: int, max_depth: int, cal: CalibrationResult, *,
                             seed: int = 0, base: float = 10.0, layer: int = 0,
                             phase: str = "search") -> list[ConvergenceSet]:
    """Collect ``n_sets`` sets, alternating between the two saturation thresholds."""
    n = o.arch[layer].n_inputs
    if n_sets < n + 1:
        raise ValueError(f"need at least {n + 1} sets, got {n_sets}")
    omap = observable_map(o.arch[layer].activation)
    if math.isclose(omap.threshold(TOP).value, omap.threshold(BOTTOM).value):
        raise InsufficientThresholdDiversity(
            f"{omap.act.value}: both saturation thresholds are {omap.threshold(TOP).value:g}")
    reachable = require_reachable(cal)
    sets = []
    for s in range(n_sets):
        d, flipped = set_plan(reachable, s)
        side = int(cal.sides[d])
        start = float(cal.maxvals[d])
        if flipped:
            start = -start * base ** flip_exponent(omap, side, base)
            side = -side
        locked = locked_values(seed, layer, neuron, s, n)
        sets.append(binary_search_threshold(o, neuron, d, locked, f32(start), max_depth, side=side,
                                            base=base, layer=layer, omap=omap, phase=phase))
    check_diversity(sets)
    return sets


def check_diversity(sets) -> None:
    values = {cs.thresholds for cs in sets}
    if len(values) < 2 or all(math.isclose(v[0], next(iter(values))[0]) for v in values):
        raise InsufficientThresholdDiversity(
            f"all {len(sets)} sets share threshold {next(iter(values))}; the system is rank deficient")
