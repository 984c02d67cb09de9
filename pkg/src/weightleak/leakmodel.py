"""Instruction-count leakage of activation and maths routines.

A :class:`RegionMap` partitions the float32 line (ordered by :func:`floats.to_key`,
so ``-0.0`` sits just below ``+0.0``) into closed key intervals on which the
reference implementation follows one branch path and therefore retires a
fixed number of instructions. Maps are derived, never hand-written: a coarse
probe grid is evaluated and every pair of neighbouring samples that disagree
is bisected down to adjacent floats.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import mathref
from .floats import (KEY_MAX, KEY_MIN, f32, floats_of, from_key, hex_bits, keys_of,
                     parse_hex_bits, to_key)


class LeakFnKind(enum.Enum):
    EXPF = "ExpF"
    LOGISTIC = "LogisticFramework"
    TANH = "TanhRef"
    RELU_BRANCHY = "ReluBranchy"
    RELU_BRANCHLESS = "ReluBranchless"


@dataclass(frozen=True, order=True)
class RegionId:
    fn_kind: LeakFnKind = field(compare=False)
    label: str

    def __str__(self) -> str:
        return f"{self.fn_kind.value}:{self.label}"


@dataclass(frozen=True)
class Region:
    """Closed interval ``[lo, hi]`` in key order. NaN is a region with lo = hi = NaN."""

    id: RegionId
    lo: np.float32
    hi: np.float32
    instr_count: int
    case: str = ""

    @property
    def label(self) -> str:
        return self.id.label

    @property
    def lo_key(self) -> int:
        return to_key(self.lo)

    @property
    def hi_key(self) -> int:
        return to_key(self.hi)

    def contains(self, x) -> bool:
        x = f32(x)
        if np.isnan(x):
            return bool(np.isnan(self.lo))
        if np.isnan(self.lo):
            return False
        return self.lo_key <= to_key(x) <= self.hi_key


@dataclass(frozen=True)
class Threshold:
    value: np.float32
    below_region: RegionId
    above_region: RegionId
    fn_kind: LeakFnKind


@dataclass(frozen=True)
class Observation:
    region: RegionId
    instr_count: int


class RegionMap:
    def __init__(self, fn_kind: LeakFnKind, regions, nan_region: Region):
        self.fn_kind = fn_kind
        self.regions = tuple(regions)
        self.nan_region = nan_region
        self._lo_keys = np.array([r.lo_key for r in self.regions], dtype=np.int64)
        self._counts = np.array([r.instr_count for r in self.regions] + [nan_region.instr_count])
        self._by_label = {r.label: r for r in self.all_regions()}
        self._index = {r.label: i for i, r in enumerate(self.all_regions())}
        self._validate()

    def _validate(self) -> None:
        rs = self.regions
        if not rs or rs[0].lo_key != KEY_MIN or rs[-1].hi_key != KEY_MAX:
            raise ValueError("regions must cover -inf..+inf")
        for a, b in zip(rs, rs[1:]):
            if a.hi_key + 1 != b.lo_key:
                raise ValueError(f"gap or overlap between {a.label} and {b.label}")
            if a.id == b.id and a.instr_count == b.instr_count:
                raise ValueError(f"adjacent duplicate region {a.label}")
        for r in rs:
            if r.lo_key > r.hi_key:
                raise ValueError(f"empty region {r.label}")
        labels = [r.label for r in self.all_regions()]
        if len(set(labels)) != len(labels):
            raise ValueError("region labels must be unique")

    def all_regions(self) -> tuple:
        return self.regions + (self.nan_region,)

    def labels(self) -> list[str]:
        return [r.label for r in self.all_regions()]

    def region(self, label: str) -> Region:
        return self._by_label[label]

    def index_of(self, label: str) -> int:
        """Index into :meth:`all_regions` (NaN region is last)."""
        return self._index[label]

    def lookup(self, x) -> Region:
        x = f32(x)
        if np.isnan(x):
            return self.nan_region
        i = int(np.searchsorted(self._lo_keys, to_key(x), side="right")) - 1
        return self.regions[i]

    def lookup_batch(self, xs) -> np.ndarray:
        """Region indices into :meth:`all_regions` for a float32 array."""
        xs = np.asarray(xs, dtype=np.float32)
        idx = np.searchsorted(self._lo_keys, keys_of(xs), side="right") - 1
        return np.where(np.isnan(xs), len(self.regions), idx).astype(np.int16)

    def counts_of(self, idx: np.ndarray) -> np.ndarray:
        return self._counts[idx]

    def regions_with_count(self, count: int) -> list[Region]:
        return [r for r in self.all_regions() if r.instr_count == count]

    def distinct_counts(self) -> set[int]:
        return {r.instr_count for r in self.all_regions()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionMap):
            return NotImplemented
        return (self.fn_kind == other.fn_kind and _region_rows(self) == _region_rows(other))

    def __repr__(self) -> str:
        return f"RegionMap({self.fn_kind.value}, {len(self.regions)} regions)"

    def table(self) -> str:
        lines = []
        for r in self.all_regions():
            lines.append(f"{r.label:<12} {float(r.lo):>16.9g} {float(r.hi):>16.9g} {r.instr_count:>4}")
        return "\n".join(lines)

    # text format: label lo_hex hi_hex count, one region per line
    def dumps(self) -> str:
        rows = [f"# {self.fn_kind.value}"]
        rows += [" ".join(map(str, row)) for row in _region_rows(self)]
        return "\n".join(rows) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RegionMap":
        kind = None
        regions = []
        nan_region = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                kind = LeakFnKind(line[1:].strip())
                continue
            if kind is None:
                raise ValueError("missing function kind header")
            label, lo, hi, count = line.split()
            lo_f, hi_f = parse_hex_bits(lo), parse_hex_bits(hi)
            r = Region(RegionId(kind, label), lo_f, hi_f, int(count))
            if np.isnan(lo_f):
                nan_region = r
            else:
                regions.append(r)
        if nan_region is None:
            raise ValueError("map has no NaN region")
        return cls(kind, regions, nan_region)

    @classmethod
    def load(cls, path) -> "RegionMap":
        return cls.loads(Path(path).read_text())


def _region_rows(m: RegionMap):
    return [(r.label, hex_bits(r.lo), hex_bits(r.hi), r.instr_count) for r in m.all_regions()]


# ---------------------------------------------------------------------------
# reference evaluation

_SCALAR = {
    LeakFnKind.EXPF: mathref.expf,
    LeakFnKind.LOGISTIC: mathref.logistic,
    LeakFnKind.TANH: mathref.tanh,
    LeakFnKind.RELU_BRANCHY: mathref.max_branchy,
    LeakFnKind.RELU_BRANCHLESS: mathref.max_branchless,
}


def reference_eval(kind: LeakFnKind, x) -> mathref.RefResult:
    """Run the reference implementation of ``kind`` on float32 ``x``."""
    return _SCALAR[kind](f32(x))


def reference_eval_batch(kind: LeakFnKind, xs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised evaluation: (y, path case name per element, instruction count)."""
    xs = np.ascontiguousarray(xs, dtype=np.float32)
    if kind is LeakFnKind.EXPF:
        y, code = mathref.expf_batch(xs)
        names = np.array(mathref.EXPF_CASES, dtype=object)[code]
    elif kind is LeakFnKind.LOGISTIC:
        y, branch, _ = mathref.logistic_batch(xs)
        names = np.array(["lower", "standard", "saturate_one"], dtype=object)[branch]
    elif kind is LeakFnKind.TANH:
        with np.errstate(all="ignore"):
            a = mathref.expf_batch(xs)[0]
            b = mathref.expf_batch(-xs)[0]
            y = (a - b) / (a + b)
        names = np.full(xs.shape, "tanh", dtype=object)
    elif kind is LeakFnKind.RELU_BRANCHY:
        y = mathref.relu_batch(xs)
        with np.errstate(invalid="ignore"):
            names = np.where(xs > 0, "pass", "clamp").astype(object)
    else:
        y = mathref.relu_batch(xs)
        names = np.full(xs.shape, "max", dtype=object)
    counts = np.vectorize(lambda c: case_counts(kind)[c], otypes=[np.int64])(names) if xs.size else np.zeros(0, np.int64)
    return y, names, counts


@lru_cache(maxsize=None)
def _case_count_table(kind: LeakFnKind) -> tuple:
    m = derive_region_map(kind)
    table = {}
    for r in m.all_regions():
        prev = table.setdefault(r.case, r.instr_count)
        if prev != r.instr_count:
            raise AssertionError(f"case {r.case} has two counts")
    return tuple(sorted(table.items()))


def case_counts(kind: LeakFnKind) -> dict[str, int]:
    """Instruction count per reference path case, read off the derived map."""
    return dict(_case_count_table(kind))


# ---------------------------------------------------------------------------
# derivation

_BASE_LABELS = {
    "nan": "NaN", "inf_pos": "InfPos", "inf_neg": "InfNeg", "overflow": "Overflow",
    "underflow": "Underflow", "filtered": "Filtered", "scaled": "Scaled",
    "normal": "Normal", "inner1": "Inner1", "inner2": "Inner2", "too_small": "TooSmall",
    "lower": "Lower", "standard": "Standard", "saturate_one": "SaturateOne",
    "tanh": "Tanh", "clamp": "Clamp", "pass": "Pass", "max": "Max",
}


def probe_grid() -> np.ndarray:
    """Sorted unique keys of the coarse probe grid (64 log-spaced points per binade)."""
    exps = np.arange(-149, 128, dtype=np.float64)
    frac = np.arange(64, dtype=np.float64) / 64.0
    mags = np.exp2((exps[:, None] + frac[None, :]).ravel()).astype(np.float32)
    with np.errstate(over="ignore"):
        mags = mags[np.isfinite(mags) & (mags > 0)]
    extra = np.array([0.0, -0.0, np.inf, -np.inf, np.finfo(np.float32).max,
                      -np.finfo(np.float32).max], dtype=np.float32)
    xs = np.concatenate([mags, -mags, extra])
    return np.unique(keys_of(xs))


def _signature(kind: LeakFnKind, key: int):
    r = reference_eval(kind, from_key(key))
    return (r.case, r.path, r.instr_count)


def _find_boundaries(a: int, sa, b: int, sb, sig, out: list) -> None:
    """Append every key ``k`` in [a, b) with sig(k) != sig(k+1) reachable by bisection."""
    if sa == sb:
        return
    if b - a == 1:
        out.append(a)
        return
    m = (a + b) // 2
    sm = sig(m)
    _find_boundaries(a, sa, m, sm, sig, out)
    _find_boundaries(m, sm, b, sb, sig, out)


def derive_partition(sig_many) -> list[tuple[int, int, object]]:
    """Partition the non-NaN float32 keys into maximal runs of equal signature.

    ``sig_many(keys)`` maps an int64 key array to a list of hashable signatures.
    The probe grid is evaluated in one batch; every disagreeing neighbour pair
    is then bisected to adjacent floats. Returns ``(lo_key, hi_key, signature)``.
    """
    cache: dict[int, object] = {}

    def sig(k: int):
        s = cache.get(k)
        if s is None:
            s = cache[k] = sig_many(np.array([k], dtype=np.int64))[0]
        return s

    grid = probe_grid()
    for k, s in zip(grid.tolist(), sig_many(grid)):
        cache[k] = s
    bounds: list[int] = []
    for a, b in zip(grid[:-1].tolist(), grid[1:].tolist()):
        _find_boundaries(a, cache[a], b, cache[b], sig, bounds)
    starts = [KEY_MIN] + [b + 1 for b in bounds]
    ends = bounds + [KEY_MAX]
    return [(lo, hi, sig(lo)) for lo, hi in zip(starts, ends)]


@lru_cache(maxsize=None)
def derive_region_map(kind: LeakFnKind) -> RegionMap:
    """Derive the region map of ``kind`` by probing its reference implementation."""
    raw = derive_partition(lambda keys: [_signature(kind, int(k)) for k in keys])
    if len({s for _, _, s in raw}) < 2 and kind in (LeakFnKind.EXPF, LeakFnKind.LOGISTIC,
                                                     LeakFnKind.RELU_BRANCHY):
        raise AssertionError(f"{kind.value} is declared leaky but probing found one class")

    base_uses: dict[str, int] = {}
    for _, _, s in raw:
        base_uses[s[0]] = base_uses.get(s[0], 0) + 1
    regions = []
    for lo, hi, (case, _, count) in raw:
        label = _BASE_LABELS[case]
        if base_uses[case] > 1:
            if lo >= 0:
                label += "Pos"
            elif hi < 0:
                label += "Neg"
            else:
                raise AssertionError(f"repeated case {case} straddles zero")
        regions.append(Region(RegionId(kind, label), from_key(lo), from_key(hi), count, case))

    nr = reference_eval(kind, f32(np.nan))
    nan_label = "NaN" if "NaN" not in {r.label for r in regions} else "NaNInput"
    nan_region = Region(RegionId(kind, nan_label), f32(np.nan), f32(np.nan), nr.instr_count, nr.case)
    return RegionMap(kind, regions, nan_region)


def classify(m: RegionMap, x) -> Observation:
    r = m.lookup(x)
    return Observation(r.id, r.instr_count)


def classify_batch(m: RegionMap, xs) -> np.ndarray:
    return m.lookup_batch(xs)


def thresholds_of(m: RegionMap) -> list[Threshold]:
    """One threshold per adjacent region pair, valued at the last float of the lower region."""
    return [Threshold(a.hi, a.id, b.id, m.fn_kind) for a, b in zip(m.regions, m.regions[1:])]


def threshold_between(m: RegionMap, below: str, above: str) -> Threshold:
    for t in thresholds_of(m):
        if t.below_region.label == below and t.above_region.label == above:
            return t
    raise KeyError(f"no threshold {below}->{above}")


__all__ = [
    "LeakFnKind", "RegionId", "Region", "RegionMap", "Threshold", "Observation",
    "reference_eval", "reference_eval_batch", "derive_region_map", "classify",
    "classify_batch", "thresholds_of", "threshold_between", "case_counts", "probe_grid",
    "floats_of",
]
