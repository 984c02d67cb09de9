"""Input-centric search: one query observes every neuron of the layer at once.

All neurons' thresholds along one input are searched together. A gap is an
interval of the input value known to hold the crossing of at least one
neuron; each iteration queries every open gap's midpoint once and splits the
gap by which neurons had already saturated there. Gaps holding no neurons are
dropped, so clustered weights share most of their queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..floats import f32, midpoint
from .calibrate import calibrate_layer_input_centric
from .config import AttackConfig
from .errors import AttackError, LostBracket
from .observable import observable_map
from .oracle import Oracle
from .recover import RecoveredLayer, log
from .search import ConvergenceSet, check_diversity, flip_exponent, locked_values
from .solve import solve_neuron


# locked values shared by all neurons come from their own sub-stream
SHARED_STREAM = 1 << 30


@dataclass
class GapSearchResult:
    brackets: dict                 # neuron -> (a, b): not saturated at a, saturated at b
    queries: int
    iterations: list = field(default_factory=list)   # (open gaps, gap width) per iteration


def gap_search(saturated_at, lo, hi, neurons, min_gap: float) -> GapSearchResult:
    """Shared bisection of many monotone crossings inside ``[lo, hi]``.

    ``saturated_at(t)`` queries once and returns, per neuron, whether it has
    crossed at ``t``. Every neuron must be uncrossed at ``lo`` and crossed at
    ``hi``. Gaps stop splitting once no wider than ``min_gap`` or ulp-tight.
    """
    gaps = [(f32(lo), f32(hi), list(neurons))] if len(neurons) else []
    done: dict = {}
    queries = 0
    iterations = []
    while gaps:
        open_gaps = []
        for a, b, ns in gaps:
            if abs(float(b) - float(a)) <= min_gap or midpoint(a, b) is None:
                for j in ns:
                    done[j] = (a, b)
            else:
                open_gaps.append((a, b, ns))
        if not open_gaps:
            break
        iterations.append((len(open_gaps), abs(float(open_gaps[0][1]) - float(open_gaps[0][0]))))
        gaps = []
        for a, b, ns in open_gaps:
            m = midpoint(a, b)
            state = saturated_at(m)
            queries += 1
            left = [j for j in ns if state[j]]
            right = [j for j in ns if not state[j]]
            if left:
                gaps.append((a, m, left))
            if right:
                gaps.append((m, b, right))
    return GapSearchResult(dict(sorted(done.items())), queries, iterations)


class _Line:
    """Queries along one input with the others locked, seen from every neuron at once."""

    def __init__(self, o: Oracle, d: int, locked, direction: int, targets: dict, phase: str):
        self.o, self.d, self.direction, self.targets, self.phase = o, d, direction, targets, phase
        self.omap = observable_map(o.arch[0].activation)
        self.x = np.array(locked, dtype=np.float32)

    def __call__(self, t) -> dict:
        self.x[self.d] = f32(self.direction * float(t))
        sigs = self.o.query(self.x, self.phase).signatures(0)
        out = {}
        for j, side in self.targets.items():
            got = self.omap.side_of(sigs[j])
            if got == -side:
                raise LostBracket(f"neuron {j}: opposite saturation on input {self.d}")
            out[j] = got == side
        return out


def equation_for_input(o: Oracle, cal, d: int, *, locked, flipped: bool, min_gap: float,
                       base: float, phase: str = "search", max_extend: int = 8):
    """Gap-search input ``d`` for all neurons that calibration says it can saturate.

    Returns (convergence sets by neuron, GapSearchResult, span).
    """
    omap = observable_map(o.arch[0].activation)
    reach = np.flatnonzero(cal.sides[:, d] != 0)
    if len(reach) == 0:
        return {}, GapSearchResult({}, 0), 0.0
    sides = {int(j): int(cal.sides[j, d]) * (-1 if flipped else 1) for j in reach}
    starts = cal.maxvals[reach, d].astype(np.float64)
    if flipped:
        starts = starts * np.array([base ** flip_exponent(omap, int(cal.sides[j, d]), base) for j in reach])
    line = _Line(o, d, locked, -1 if flipped else 1, sides, phase)
    span = f32(starts.max())
    extra = 0
    # the far end must saturate every neuron under these locked values
    for _ in range(max_extend):
        state = line(span)
        extra += 1
        missing = [j for j, s in state.items() if not s]
        if not missing:
            break
        span = f32(float(span) * base)
    else:
        for j in missing:
            sides.pop(j)
    result = gap_search(line, 0.0, span, sorted(sides), min_gap)
    result.queries += extra
    sets = {}
    for j, (a, b) in result.brackets.items():
        x = np.array(locked, dtype=np.float32)
        lo, hi = f32(line.direction * float(a)), f32(line.direction * float(b))
        x[d] = lo
        sets[j] = ConvergenceSet(x, d, lo, hi, (omap.threshold(sides[j]).value,), (0, j), True, sides[j],
                                 trail=[(lo, hi)])
    return sets, result, float(span)


def input_centric_recover(o: Oracle, layer: int = 0, min_gap: float = 0.1,
                          cfg: AttackConfig | None = None) -> RecoveredLayer:
    """Recover a first layer with one shared gap search per equation.

    Equations ``0 .. n-1`` move input ``e`` in the positive direction; the
    remaining ``1 + extras`` revisit inputs in the negative direction so that
    every neuron sees both saturation thresholds.
    """
    cfg = cfg or AttackConfig(strategy="input", min_gap=min_gap)
    if layer != 0:
        raise ValueError("input-centric recovery needs direct control of the layer inputs")
    spec = o.arch[0]
    N, n = spec.n_neurons, spec.n_inputs
    cal = calibrate_layer_input_centric(o, 0, base=cfg.input_base, D=cfg.input_D)
    per_neuron: dict[int, list] = {j: [] for j in range(N)}
    for e in range(n + 1 + cfg.extras):
        d, flipped = e % n, (e // n) % 2 == 1
        locked = locked_values(cfg.seed, 0, SHARED_STREAM, e, n)
        sets, res, span = equation_for_input(o, cal, d, locked=locked, flipped=flipped, min_gap=min_gap,
                                             base=cfg.input_base)
        for j, cs in sets.items():
            per_neuron[j].append(cs)
        for it, (gaps, width) in enumerate(res.iterations):
            log.info("\titeration %d: %d gaps, spans: %g", it, gaps, width)
        log.info("Done with equation #%d/%d in %d iterations (span %g, %d neurons)",
                 e + 1, n + 1 + cfg.extras, res.queries, span, len(sets))
    w = np.full((N, n), np.nan)
    b = np.full(N, np.nan)
    res_ = np.full(N, np.nan)
    unsolved = {}
    for j, sets in per_neuron.items():
        try:
            if len(sets) < n + 1:
                raise AttackError(f"only {len(sets)} equations for {n + 1} unknowns")
            check_diversity(sets)
            w[j], b[j], res_[j] = solve_neuron(sets)
        except AttackError as ex:
            unsolved[j] = f"{type(ex).__name__}: {ex}"
    stats = {"incomplete_logs": o.incomplete_logs, "nondeterministic": o.nondeterministic,
             "neuron_check_failures": 0}
    return RecoveredLayer(0, spec.activation, w, b, res_, unsolved, o.query_counter, dict(o.phases),
                          per_neuron, cal, None, "input", stats)


@dataclass
class StrategyComparison:
    calibration: int
    input_centric: int
    neuron_centric: int
    span: float
    iterations: list

    @property
    def ratio(self) -> float:
        return self.input_centric / self.neuron_centric


def compare_on_input(o: Oracle, d: int, min_gap: float = 0.1, *, seed: int = 0, base: float = 2.0,
                     D: int = 64) -> StrategyComparison:
    """Executions to pin every neuron's threshold on input ``d`` to ``min_gap``, both ways.

    The neuron-centric figure bisects each neuron alone from the same bracket
    to the same width, through the same oracle.
    """
    q0 = o.query_counter
    cal = calibrate_layer_input_centric(o, 0, base=base, D=D, inputs=[d])
    n_cal = o.query_counter - q0
    locked = np.zeros(o.arch[0].n_inputs, np.float32)
    sets, res, span = equation_for_input(o, cal, d, locked=locked, flipped=False, min_gap=min_gap, base=base,
                                         phase="input-centric")
    line = _Line(o, d, locked, 1, {j: int(cal.sides[j, d]) for j in sets}, "neuron-centric")
    nc = sum(gap_search(line, 0.0, span, [j], min_gap).queries for j in sets)
    return StrategyComparison(n_cal, res.queries, nc, span, res.iterations)
