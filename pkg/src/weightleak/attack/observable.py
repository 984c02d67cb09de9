"""What one neuron's instruction counts reveal about its pre-activation.

For an activation kind, the float32 pre-activation line is partitioned into
maximal intervals of equal count signature (the tuple of counts of every leaky
call the activation makes). The two ends of the line are the saturation sides
the attack drives neurons into.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..floats import f32, floats_of, from_key, next_up, to_key
from ..leakmodel import derive_partition
from ..victim import ActivationKind, _activate

TOP, BOTTOM = 1, -1


@dataclass(frozen=True)
class SideThreshold:
    """Boundary between a saturation side and the interval next to it.

    ``last`` is the final float outside the side (walking inward from the
    side), ``first`` the first float inside it. ``value`` is their double
    midpoint, the right-hand side of a convergence-set equation.
    """

    side: int
    last: np.float32
    first: np.float32

    @property
    def value(self) -> float:
        return 0.5 * (float(self.last) + float(self.first))


def _signatures(act: ActivationKind, keys: np.ndarray) -> list[tuple[int, ...]]:
    _, _, counts = _activate(act, floats_of(keys))
    return [tuple(int(v) for v in row if v >= 0) for row in counts]


class ObservableMap:
    def __init__(self, act: ActivationKind, parts):
        self.act = act
        self.parts = tuple(parts)
        self._lo_keys = np.array([p[0] for p in self.parts], dtype=np.int64)
        # the outermost intervals may hold only ±inf; saturation is what the largest finite value gives
        self.top_sig = self.signature_of(f32(np.finfo(np.float32).max))
        self.bottom_sig = self.signature_of(f32(-np.finfo(np.float32).max))
        self.top = self._side_threshold(TOP)
        self.bottom = self._side_threshold(BOTTOM)

    def signature_of(self, sigma) -> tuple[int, ...]:
        i = int(np.searchsorted(self._lo_keys, to_key(f32(sigma)), side="right")) - 1
        return self.parts[i][2]

    def intervals_with(self, sig) -> list[int]:
        return [i for i, p in enumerate(self.parts) if p[2] == sig]

    def _side_threshold(self, side: int) -> SideThreshold | None:
        sig = self.top_sig if side == TOP else self.bottom_sig
        idx = self.intervals_with(sig)
        if side == TOP:
            i = idx[-1]
            # walk inward over adjacent intervals that saturate too (e.g. +inf)
            while i - 1 >= 0 and self.parts[i - 1][2] == sig:
                i -= 1
            if i == 0:
                return None
            first = from_key(self.parts[i][0])
            return SideThreshold(TOP, from_key(self.parts[i][0] - 1), first)
        i = idx[0]
        if i == len(self.parts) - 1:
            return None
        last_in = from_key(self.parts[i][1])
        return SideThreshold(BOTTOM, next_up(last_in), last_in)

    def side_of(self, sig) -> int:
        """TOP or BOTTOM when ``sig`` is only seen on that saturation side, else 0."""
        if sig == self.top_sig and sig != self.bottom_sig:
            return TOP
        if sig == self.bottom_sig and sig != self.top_sig:
            return BOTTOM
        return 0

    def threshold(self, side: int) -> SideThreshold:
        t = self.top if side == TOP else self.bottom
        if t is None:
            raise ValueError(f"{self.act.value} has no {'top' if side == TOP else 'bottom'} saturation")
        return t

    @property
    def attackable(self) -> bool:
        return (self.top is not None and self.bottom is not None
                and self.top_sig != self.bottom_sig)

    def boundaries_between(self, sig_a, sig_b) -> list[float]:
        """Double midpoints of every boundary where ``sig_a`` and ``sig_b`` are adjacent."""
        out = []
        for p, q in zip(self.parts, self.parts[1:]):
            if {p[2], q[2]} == {sig_a, sig_b}:
                out.append(0.5 * (float(from_key(p[1])) + float(from_key(q[0]))))
        return out


@lru_cache(maxsize=None)
def observable_map(act: ActivationKind) -> ObservableMap:
    parts = derive_partition(lambda keys: _signatures(act, np.asarray(keys, dtype=np.int64)))
    return ObservableMap(act, parts)
