"""Find, per input, the sign of each weight and a magnitude that saturates the neuron."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..floats import f32
from .errors import Unreachable
from .observable import observable_map
from .oracle import Oracle


@dataclass
class CalibrationResult:
    sides: np.ndarray     # int8 per input: +1 top saturation, -1 bottom, 0 unreachable
    maxvals: np.ndarray   # float32 per input, 0 where unreachable
    queries: int = 0

    @property
    def signs(self) -> np.ndarray:
        return self.sides.copy()

    @property
    def reachable(self) -> np.ndarray:
        return np.flatnonzero(self.sides != 0)

    def sign_string(self) -> str:
        return " ".join({1: "+", -1: "-", 0: "?"}[int(s)] for s in self.sides)


@dataclass
class LayerCalibration:
    """Saturation side and magnitude of every (neuron, input) pair of one layer."""

    sides: np.ndarray     # (N, n) int8
    maxvals: np.ndarray   # (N, n) float32
    base: float
    queries: np.ndarray   # per input

    def for_neuron(self, j: int) -> CalibrationResult:
        return CalibrationResult(self.sides[j].copy(), self.maxvals[j].copy(), int(self.queries.sum()))


def _layer_act(o: Oracle, layer: int):
    return o.arch[layer].activation


def calibrate_neuron(o: Oracle, neuron: int, n_inputs: int, base: float = 10.0, *, D: int = 38,
                     layer: int = 0, seed: int = 0, phase: str = "calibrate") -> CalibrationResult:
    """Probe each input with ``base**k`` (k = 0, 1, ...) over small random locked values."""
    if base <= 1:
        raise ValueError("base must exceed 1")
    omap = observable_map(_layer_act(o, layer))
    locked = np.random.default_rng([seed, layer, neuron, 1 << 20]).uniform(-1, 1, n_inputs).astype(np.float32)
    sides = np.zeros(n_inputs, np.int8)
    maxvals = np.zeros(n_inputs, np.float32)
    q0 = o.query_counter
    for i in range(n_inputs):
        for k in range(D):
            v = f32(base ** k)
            if not np.isfinite(v):
                break
            x = locked.copy()
            x[i] = v
            side = omap.side_of(o.query(x, phase).signature(layer, neuron))
            if side:
                sides[i], maxvals[i] = side, v
                break
    return CalibrationResult(sides, maxvals, o.query_counter - q0)


def calibrate_layer_input_centric(o: Oracle, layer: int = 0, base: float = 2.0, *, D: int = 64,
                                  inputs=None, phase: str = "calibrate") -> LayerCalibration:
    """Calibrate every neuron of ``layer`` at once, one input at a time.

    Each probe sets a single input to ``base**k`` with all others zero; the
    input is finished as soon as every neuron is saturated, or after D probes.
    """
    if layer != 0:
        raise ValueError("calibration needs direct control of the layer inputs")
    omap = observable_map(_layer_act(o, layer))
    n, N = o.arch[layer].n_inputs, o.arch[layer].n_neurons
    sides = np.zeros((N, n), np.int8)
    maxvals = np.zeros((N, n), np.float32)
    queries = np.zeros(n, np.int64)
    for i in (range(n) if inputs is None else inputs):
        for k in range(D):
            v = f32(base ** k)
            if not np.isfinite(v):
                break
            x = np.zeros(n, np.float32)
            x[i] = v
            sigs = o.query(x, phase).signatures(layer)
            queries[i] += 1
            for j, sig in enumerate(sigs):
                if sides[j, i] == 0:
                    side = omap.side_of(sig)
                    if side:
                        sides[j, i], maxvals[j, i] = side, v
            if (sides[:, i] != 0).all():
                break
    return LayerCalibration(sides, maxvals, base, queries)


def require_reachable(cal: CalibrationResult) -> np.ndarray:
    r = cal.reachable
    if len(r) == 0:
        raise Unreachable("no input saturates this neuron")
    return r
