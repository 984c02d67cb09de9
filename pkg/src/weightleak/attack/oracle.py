"""Query interface to the victim.

The attacker sees instruction counts only: one ``(n_neurons, n_slots)`` int
array per layer, ``-1`` where a slot was not invoked. In ``trace`` mode the
counts are recovered by emitting and re-parsing the page trace.
"""
from __future__ import annotations

import hashlib
import threading
from collections import Counter

import numpy as np

from .. import trace as tr
from ..victim import ModelSpec, infer


class Response:
    __slots__ = ("counts",)

    def __init__(self, counts: list[np.ndarray]):
        self.counts = counts

    def signature(self, layer: int, neuron: int) -> tuple[int, ...]:
        row = self.counts[layer][neuron]
        return tuple(int(v) for v in row if v >= 0)

    def signatures(self, layer: int) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in row if v >= 0) for row in self.counts[layer]]


class Oracle:
    """Counts every victim inference and attributes it to a named phase."""

    def __init__(self, model: ModelSpec, mode: str = "direct", layout: tr.PageLayout = tr.DEFAULT_LAYOUT,
                 guard: bool = True):
        if mode not in ("direct", "trace"):
            raise ValueError(f"unknown oracle mode {mode!r}")
        self._model = model
        self.mode = mode
        self.layout = layout
        self.arch = list(model.layers)
        self.query_counter = 0
        self.phases: Counter = Counter()
        self.incomplete_logs = 0
        self.nondeterministic = 0
        self._guard = {} if guard else None
        self._lock = threading.Lock()

    @property
    def n_inputs(self) -> int:
        return self.arch[0].n_inputs

    def query(self, x, phase: str = "other") -> Response:
        x = np.asarray(x, dtype=np.float32)
        _, log = infer(self._model, x)
        if self.mode == "direct":
            counts = [l.counts.copy() for l in log.layers]
        else:
            counts = self._via_trace(log)
        with self._lock:
            self.query_counter += 1
            self.phases[phase] += 1
            if self._guard is not None:
                key = hashlib.blake2b(x.tobytes(), digest_size=16).digest()
                packed = b"".join(c.tobytes() for c in counts)
                seen = self._guard.setdefault(key, packed)
                if seen != packed:
                    self.nondeterministic += 1
        return Response(counts)

    def _via_trace(self, log) -> list[np.ndarray]:
        t = tr.emit_trace(log, self.layout)
        try:
            parsed = tr.parse_trace(t, self.layout, self.arch)
        except tr.TraceError:
            with self._lock:
                self.incomplete_logs += 1
            raise
        out = []
        for spec, layer in zip(self.arch, parsed):
            c = np.full((spec.n_neurons, len(spec.activation.leak_fns)), -1, dtype=np.int32)
            for i, pn in enumerate(layer):
                c[i, :len(pn.counts)] = pn.counts
            out.append(c)
        return out

    def phase_total(self) -> int:
        return sum(self.phases.values())

    def restore(self, counter: int, phases: dict) -> None:
        """Resume accounting from a checkpoint."""
        with self._lock:
            self.query_counter = counter
            self.phases = Counter(phases)
