"""Synthetic page-granular instruction-count traces of an inference run.

A trace is a list of maximal runs ``(page, instr_count)``: consecutive
instructions retired on the same code page collapse into one run. Each layer
is bracketed by two marker runs on the dispatch page; consecutive layers are
separated by a glue run so their markers stay distinct. Inside a layer each
neuron executes framework code (the activation kernel) and, when the kernel
calls into the maths library, a run on the libm page whose length is the
callee's instruction count.

Framework segments of adjacent neurons merge whenever no libm run separates
them, so the parser only sees sums. It recovers per-neuron branches by
searching all decodings of the run stream against the per-activation neuron
templates, and rejects the trace when there is no decoding or more than one.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import mathref
from .floats import f32, from_key, to_key
from .leakmodel import LeakFnKind, Region, RegionId, derive_region_map
from .victim import ActivationKind, LayerSpec, LeakLog


class TraceError(ValueError):
    pass


class IncompleteTrace(TraceError):
    pass


class AmbiguousCount(TraceError):
    pass


@dataclass(frozen=True)
class PageLayout:
    dispatch_page: int = 0x2C000
    framework_page: int = 0x2D000  # ExpEval / Logistic kernels
    libm_page: int = 0x3F000  # expf, max
    glue_page: int = 0x2E000  # subgraph invocation between layers
    layer_marker_count: int = 18
    glue_count: int = 9
    # macro-op fusion shifts retired-instruction counts by a fixed amount
    fusion_offset: int = 0

    def __post_init__(self):
        pages = {self.dispatch_page, self.framework_page, self.libm_page, self.glue_page}
        if len(pages) != 4:
            raise ValueError("page ids must be distinct")


DEFAULT_LAYOUT = PageLayout()


@dataclass
class TraceLog:
    runs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        for (p, c) in self.runs:
            if c <= 0:
                raise ValueError("run counts must be positive")
        for a, b in zip(self.runs, self.runs[1:]):
            if a[0] == b[0]:
                raise ValueError("consecutive runs must be on different pages")

    def __len__(self) -> int:
        return len(self.runs)

    def dumps(self) -> str:
        return "".join(f"P {p:x} {c}\n" for p, c in self.runs)

    @classmethod
    def loads(cls, text: str) -> "TraceLog":
        runs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] != "P":
                raise TraceError(f"line {n}: expected 'P <page-hex> <count>'")
            try:
                runs.append((int(parts[1], 16), int(parts[2], 10)))
            except ValueError as e:
                raise TraceError(f"line {n}: {e}") from e
        try:
            return cls(runs)
        except ValueError as e:
            raise TraceError(str(e)) from e

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "TraceLog":
        return cls.loads(Path(path).read_text())


def merge_runs(segments) -> list[tuple[int, int]]:
    out: list[list[int]] = []
    for p, c in segments:
        if c <= 0:
            continue
        if out and out[-1][0] == p:
            out[-1][1] += c
        else:
            out.append([p, c])
    return [(p, c) for p, c in out]


# ---------------------------------------------------------------------------
# neuron templates

@dataclass(frozen=True)
class Variant:
    """One way a neuron can execute: framework segment lengths around its libm calls."""

    name: str
    framework: tuple[int, ...]  # len == n_calls + 1
    slots: tuple[LeakFnKind, ...]  # leak fn of each libm call
    allowed: tuple[frozenset, ...]  # region labels admissible for each call
    framework_region: RegionId | None = None  # Logistic branch, if any

    @property
    def n_calls(self) -> int:
        return len(self.slots)


def _regions_meeting(kind: LeakFnKind, lo, hi, with_nan: bool) -> frozenset:
    """Labels of regions of ``kind`` intersecting the closed float interval [lo, hi]."""
    m = derive_region_map(kind)
    klo, khi = to_key(lo), to_key(hi)
    out = {r.label for r in m.regions if r.lo_key <= khi and r.hi_key >= klo}
    if with_nan:
        out.add(m.nan_region.label)
    return frozenset(out)


def _all_labels(kind: LeakFnKind) -> frozenset:
    return frozenset(derive_region_map(kind).labels())


# framework instructions wrapped around a direct libm call, per activation
EXP_EVAL_SEGMENTS = (3, 4)
TANH_SEGMENTS = (3, 4, 7)
RELU_SEGMENTS = (3, 4)


@lru_cache(maxsize=None)
def variants(act: ActivationKind) -> tuple[Variant, ...]:
    if act is ActivationKind.EXPONENTIAL:
        return (Variant("call", EXP_EVAL_SEGMENTS, (LeakFnKind.EXPF,), (_all_labels(LeakFnKind.EXPF),)),)
    if act is ActivationKind.TANH:
        allk = _all_labels(LeakFnKind.EXPF)
        return (Variant("call", TANH_SEGMENTS, (LeakFnKind.EXPF,) * 2, (allk, allk)),)
    if act in (ActivationKind.RELU, ActivationKind.RELU_BRANCHY):
        kind = act.leak_fns[0]
        return (Variant("call", RELU_SEGMENTS, (kind,), (_all_labels(kind),)),)
    if act is ActivationKind.SIGMOID:
        lm = derive_region_map(LeakFnKind.LOGISTIC)
        out = []
        for r in lm.regions:
            ref = mathref.logistic(r.lo if np.isfinite(r.lo) else r.hi)
            if not ref.calls:
                out.append(Variant(r.case, ref.segments, (), (), r.id))
                continue
            neg = ref.calls[0][1] != f32(r.lo if np.isfinite(r.lo) else r.hi)
            lo, hi = (-r.hi, -r.lo) if neg else (r.lo, r.hi)
            # NaN pre-activations take the branch that owns the NaN region's count
            with_nan = r.instr_count == lm.nan_region.instr_count and r.case == lm.nan_region.case
            allowed = _regions_meeting(LeakFnKind.EXPF, f32(lo), f32(hi), with_nan)
            out.append(Variant(r.case, ref.segments, (LeakFnKind.EXPF,), (allowed,), r.id))
        return tuple(out)
    raise ValueError(act)


# ---------------------------------------------------------------------------
# emit

def _neuron_segments(act: ActivationKind, counts_row, ridx_row, layout: PageLayout):
    fw, lib = layout.framework_page, layout.libm_page
    if act is ActivationKind.SIGMOID:
        lm = derive_region_map(LeakFnKind.LOGISTIC)
        case = lm.all_regions()[int(ridx_row[0])].case
        v = next(v for v in variants(act) if v.name == case)
        libm_counts = [int(c) for c in counts_row[1:] if c >= 0]
    else:
        v = variants(act)[0]
        libm_counts = [int(c) for c in counts_row]
    segs = [(fw, v.framework[0])]
    for c, f in zip(libm_counts, v.framework[1:]):
        segs.append((lib, c + layout.fusion_offset))
        segs.append((fw, f))
    return segs


def emit_trace(log: LeakLog, layout: PageLayout = DEFAULT_LAYOUT) -> TraceLog:
    segs: list[tuple[int, int]] = []
    for k, layer in enumerate(log.layers):
        if k:
            segs.append((layout.glue_page, layout.glue_count))
        segs.append((layout.dispatch_page, layout.layer_marker_count))
        for i in range(layer.n_neurons):
            segs.extend(_neuron_segments(layer.activation, layer.counts[i], layer.region_idx[i], layout))
        segs.append((layout.dispatch_page, layout.layer_marker_count))
    return TraceLog(merge_runs(segs))


# ---------------------------------------------------------------------------
# parse

@dataclass(frozen=True)
class ParsedNeuron:
    variant: str
    counts: tuple[int, ...]  # framework region count (if any) followed by libm counts
    candidates: tuple[tuple[RegionId, ...], ...]  # per logged slot, regions consistent with the trace

    def region_ids(self) -> tuple[RegionId | None, ...]:
        """Per slot, the region when the trace pins it down uniquely, else None."""
        return tuple(c[0] if len(c) == 1 else None for c in self.candidates)


def _split_layers(t: TraceLog, layout: PageLayout, n_layers: int) -> list[list[tuple[int, int]]]:
    runs = list(t.runs)
    D, M = layout.dispatch_page, layout.layer_marker_count
    bodies = []
    pos = 0
    for k in range(n_layers):
        if k:
            if pos >= len(runs) or runs[pos] != (layout.glue_page, layout.glue_count):
                raise IncompleteTrace(f"layer {k}: missing inter-layer glue run")
            pos += 1
        if pos >= len(runs) or runs[pos] != (D, M):
            raise IncompleteTrace(f"layer {k}: missing layer-start marker")
        pos += 1
        start = pos
        while pos < len(runs) and runs[pos][0] != D:
            pos += 1
        if pos >= len(runs) or runs[pos] != (D, M):
            raise IncompleteTrace(f"layer {k}: missing layer-end marker")
        bodies.append(runs[start:pos])
        pos += 1
    if pos != len(runs):
        raise IncompleteTrace(f"{len(runs) - pos} trailing runs after the last layer")
    return bodies


def _candidates(kind: LeakFnKind, count: int, allowed: frozenset) -> tuple[RegionId, ...]:
    m = derive_region_map(kind)
    return tuple(r.id for r in m.all_regions() if r.instr_count == count and r.label in allowed)


def _decode_layer(body, spec: LayerSpec, layout: PageLayout, k: int) -> list[ParsedNeuron]:
    fw, lib = layout.framework_page, layout.libm_page
    for p, _ in body:
        if p not in (fw, lib):
            raise IncompleteTrace(f"layer {k}: unexpected page {p:#x}")
    if not body:
        raise IncompleteTrace(f"layer {k}: empty layer body")
    if body[0][0] != fw or body[-1][0] != fw:
        raise IncompleteTrace(f"layer {k}: layer body must start and end in framework code")
    F = [c for p, c in body[0::2]]
    L = [c - layout.fusion_offset for p, c in body[1::2]]
    vs = variants(spec.activation)
    kinds = {s for v in vs for s in v.slots}
    for c in L:
        if not any(derive_region_map(kd).regions_with_count(c) for kd in kinds):
            raise AmbiguousCount(f"layer {k}: libm count {c + layout.fusion_offset} matches no region")

    n = spec.n_neurons
    n_lib = len(L)

    def call_ok(v: Variant, r: int) -> bool:
        # libm runs r .. r+n_calls-1 match v, and internal framework runs are exact
        if r + v.n_calls > n_lib:
            return False
        cands = []
        for s in range(v.n_calls):
            c = _candidates(v.slots[s], L[r + s], v.allowed[s])
            if not c:
                return False
            cands.append(c)
            if 0 < s and F[r + s] != v.framework[s]:
                return False
        if spec.activation is ActivationKind.TANH and not _mirror_consistent(cands[0], cands[1]):
            return False
        return True

    memo: dict[tuple[int, int, int], int] = {}

    def count(j: int, r: int, acc: int) -> int:
        """Number of decodings (capped at 2) of neurons j.. given acc of F[r] consumed."""
        key = (j, r, acc)
        if key in memo:
            return memo[key]
        if acc > F[r]:
            return 0
        if j == n:
            res = 1 if (r == n_lib and acc == F[r]) else 0
            memo[key] = res
            return res
        total = 0
        for v in vs:
            total += count_variant(v, j, r, acc)
            if total >= 2:
                break
        memo[key] = min(total, 2)
        return memo[key]

    def count_variant(v: Variant, j: int, r: int, acc: int) -> int:
        if v.n_calls == 0:
            return count(j + 1, r, acc + v.framework[0])
        if acc + v.framework[0] != F[r] or not call_ok(v, r):
            return 0
        return count(j + 1, r + v.n_calls, v.framework[-1])

    total = count(0, 0, 0)
    if total == 0:
        raise IncompleteTrace(f"layer {k}: runs do not decode into {n} neurons")
    if total > 1:
        raise AmbiguousCount(f"layer {k}: framework runs admit more than one decoding")

    out = []
    j, r, acc = 0, 0, 0
    while j < n:
        for v in vs:
            if count_variant(v, j, r, acc):
                break
        cands = []
        counts = []
        slot_cands = [_candidates(v.slots[s], L[r + s], v.allowed[s]) for s in range(v.n_calls)]
        if spec.activation is ActivationKind.TANH:
            slot_cands = list(_mirror_filter(*slot_cands))
        if v.framework_region is not None:
            fm = derive_region_map(v.framework_region.fn_kind)
            fr = fm.region(v.framework_region.label)
            fc = []
            # a NaN pre-activation runs the same branch and hands NaN to exp
            if not slot_cands or any(c.label != "NaN" for c in slot_cands[0]):
                fc.append(fr.id)
            nr = fm.nan_region
            if slot_cands and nr.case == fr.case and any(c.label == "NaN" for c in slot_cands[0]):
                fc.append(nr.id)
            cands.append(tuple(fc))
            counts.append(fr.instr_count)
        cands.extend(slot_cands)
        counts.extend(L[r:r + v.n_calls])
        out.append(ParsedNeuron(v.name, tuple(counts), tuple(cands)))
        if v.n_calls == 0:
            acc += v.framework[0]
        else:
            r, acc = r + v.n_calls, v.framework[-1]
        j += 1
    return out


def _mirror(region: Region) -> tuple[int, int] | None:
    if np.isnan(region.lo):
        return None
    return to_key(-region.hi), to_key(-region.lo)


def _meets_mirror(a: RegionId, b: RegionId) -> bool:
    m = derive_region_map(LeakFnKind.EXPF)
    ra, rb = m.region(a.label), m.region(b.label)
    if np.isnan(ra.lo) or np.isnan(rb.lo):
        return bool(np.isnan(ra.lo) and np.isnan(rb.lo))
    lo, hi = _mirror(ra)
    return rb.lo_key <= hi and rb.hi_key >= lo


def _mirror_consistent(c0, c1) -> bool:
    return any(_meets_mirror(a, b) for a in c0 for b in c1)


def _mirror_filter(c0, c1):
    return (tuple(a for a in c0 if any(_meets_mirror(a, b) for b in c1)),
            tuple(b for b in c1 if any(_meets_mirror(a, b) for a in c0)))


def parse_trace(t: TraceLog, layout: PageLayout, arch: list[LayerSpec]) -> list[list[ParsedNeuron]]:
    """Decode a trace into per-layer, per-neuron observations using only pages and counts."""
    bodies = _split_layers(t, layout, len(arch))
    return [_decode_layer(body, spec, layout, k) for k, (body, spec) in enumerate(zip(bodies, arch))]


def parsed_counts(parsed: list[list[ParsedNeuron]], layer: int) -> list[tuple[int, ...]]:
    return [p.counts for p in parsed[layer]]


def log_matches(parsed: list[list[ParsedNeuron]], log: LeakLog) -> bool:
    """True when every logged region is among the parsed candidates and every count agrees."""
    if len(parsed) != len(log.layers):
        return False
    for pl, ll in zip(parsed, log.layers):
        if len(pl) != ll.n_neurons:
            return False
        for i, pn in enumerate(pl):
            obs = ll.observations(i)
            if tuple(o.instr_count for o in obs) != pn.counts or len(obs) != len(pn.candidates):
                return False
            if any(o.region not in c for o, c in zip(obs, pn.candidates)):
                return False
    return True


# ---------------------------------------------------------------------------
# corruption

CORRUPT_MODES = ("truncate", "drop_run", "perturb_count")


def corrupt_trace(t: TraceLog, mode: str, seed: int) -> TraceLog:
    rng = random.Random(seed)
    runs = list(t.runs)
    if not runs:
        return TraceLog([])
    if mode == "truncate":
        k = rng.randint(1, min(len(runs), 8))
        return TraceLog(runs[:-k])
    if mode == "drop_run":
        i = rng.randrange(len(runs))
        return TraceLog(merge_runs(runs[:i] + runs[i + 1:]))
    if mode == "perturb_count":
        i = rng.randrange(len(runs))
        p, c = runs[i]
        delta = rng.choice([-3, -2, -1, 1, 2, 3])
        if c + delta <= 0:
            delta = -delta
        runs[i] = (p, c + delta)
        return TraceLog(runs)
    raise ValueError(f"unknown corruption mode {mode!r}")


__all__ = [
    "TraceError", "IncompleteTrace", "AmbiguousCount", "PageLayout", "DEFAULT_LAYOUT", "TraceLog",
    "ParsedNeuron", "Variant", "variants", "emit_trace", "parse_trace", "parsed_counts",
    "log_matches", "corrupt_trace", "merge_runs", "CORRUPT_MODES", "from_key",
]
