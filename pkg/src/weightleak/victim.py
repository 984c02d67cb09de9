"""Minimal binary32 feedforward inference engine that records its own leakage.

Every activation is evaluated through the leaky reference routines, and each
invocation of a leaky routine is logged as an :class:`Observation`. Pre-activations
accumulate sequentially from input index 0 upward with no fused multiply-add.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, mathref
from .floats import f32, hex_bits, parse_hex_bits
from .leakmodel import LeakFnKind, Observation, RegionMap, derive_region_map


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = False

    def contains(self, v: float) -> bool:
        if math.isnan(v):
            return False
        above = v >= self.lo if self.lo_closed else v > self.lo
        below = v <= self.hi if self.hi_closed else v < self.hi
        return above and below

    def __str__(self) -> str:
        return f"{'[' if self.lo_closed else '('}{self.lo}, {self.hi}{']' if self.hi_closed else ')'}"


class ActivationKind(enum.Enum):
    EXPONENTIAL = "exponential"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"
    RELU_BRANCHY = "relu_branchy"

    @property
    def leak_fns(self) -> tuple[LeakFnKind, ...]:
        """Leaky routines invoked per neuron, in call order (one log slot each)."""
        return _SLOTS[self]

    @property
    def output_range(self) -> Interval:
        return _RANGES[self]

    @property
    def invertible_on(self) -> Interval | None:
        return _INVERTIBLE[self]

    @property
    def negates_argument(self) -> bool:
        """True when the leaky routine sees -Σ rather than Σ on its main path."""
        return self is ActivationKind.SIGMOID


_SLOTS = {
    ActivationKind.EXPONENTIAL: (LeakFnKind.EXPF,),
    ActivationKind.SIGMOID: (LeakFnKind.LOGISTIC, LeakFnKind.EXPF),
    ActivationKind.TANH: (LeakFnKind.EXPF, LeakFnKind.EXPF),
    ActivationKind.RELU: (LeakFnKind.RELU_BRANCHLESS,),
    ActivationKind.RELU_BRANCHY: (LeakFnKind.RELU_BRANCHY,),
}
_INF = math.inf
_RANGES = {
    ActivationKind.EXPONENTIAL: Interval(0.0, _INF),
    ActivationKind.SIGMOID: Interval(0.0, 1.0),
    ActivationKind.TANH: Interval(-1.0, 1.0),
    ActivationKind.RELU: Interval(0.0, _INF, lo_closed=True),
    ActivationKind.RELU_BRANCHY: Interval(0.0, _INF, lo_closed=True),
}
_INVERTIBLE = {
    ActivationKind.EXPONENTIAL: Interval(0.0, _INF),
    ActivationKind.SIGMOID: Interval(0.0, 1.0),
    ActivationKind.TANH: Interval(-1.0, 1.0),
    # relu is invertible only on its strictly positive part
    ActivationKind.RELU: Interval(0.0, _INF),
    ActivationKind.RELU_BRANCHY: Interval(0.0, _INF),
}


@dataclass(frozen=True)
class LayerSpec:
    n_inputs: int
    n_neurons: int
    activation: ActivationKind

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_neurons < 1:
            raise ModelError("layers need at least one input and one neuron")


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    # when set the attacker cannot drive the first layer directly
    input_normalised: bool = False

    def __post_init__(self):
        self.weights = [np.ascontiguousarray(w, dtype=np.float32) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float32) for b in self.biases]
        for w, b in zip(self.weights, self.biases):
            w.setflags(write=False)
            b.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ModelError("model has no layers")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ModelError("layer, weight and bias lists differ in length")
        for k, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if w.shape != (spec.n_neurons, spec.n_inputs):
                raise ModelError(f"layer {k}: weight shape {w.shape} != {(spec.n_neurons, spec.n_inputs)}")
            if b.shape != (spec.n_neurons,):
                raise ModelError(f"layer {k}: bias shape {b.shape} != {(spec.n_neurons,)}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ModelError(f"layer {k}: non-finite parameter")
            if k and self.layers[k - 1].n_neurons != spec.n_inputs:
                raise ModelError(f"layer {k}: input width does not chain")

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_inputs

    def param_count(self, layer: int) -> int:
        s = self.layers[layer]
        return s.n_neurons * (s.n_inputs + 1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return (self.layers == other.layers and self.seed == other.seed
                and self.input_normalised == other.input_normalised
                and all(np.array_equal(a.view(np.uint32), b.view(np.uint32))
                        for a, b in zip(self.weights + self.biases, other.weights + other.biases)))


@dataclass
class LayerLog:
    """Leakage of one layer: slot ``s`` of neuron ``i`` is region index / count, -1 if absent."""

    activation: ActivationKind
    pre: np.ndarray
    region_idx: np.ndarray
    counts: np.ndarray

    @property
    def n_neurons(self) -> int:
        return len(self.pre)

    def observations(self, neuron: int) -> list[Observation]:
        out = []
        for s, kind in enumerate(self.activation.leak_fns):
            ri = int(self.region_idx[neuron, s])
            if ri < 0:
                continue
            region = region_map(kind).all_regions()[ri]
            out.append(Observation(region.id, int(self.counts[neuron, s])))
        return out


@dataclass
class LeakLog:
    layers: list[LayerLog] = field(default_factory=list)

    def observations(self) -> list[list[list[Observation]]]:
        return [[l.observations(i) for i in range(l.n_neurons)] for l in self.layers]

    def count_tuples(self, layer: int) -> list[tuple[int, ...]]:
        """Per neuron, the instruction counts of the present invocations."""
        c = self.layers[layer].counts
        return [tuple(int(v) for v in row if v >= 0) for row in c]


def region_map(kind: LeakFnKind) -> RegionMap:
    return derive_region_map(kind)


def _activate(act: ActivationKind, pre: np.ndarray):
    """Apply ``act`` in float32; returns (outputs, region idx, counts) with one column per slot."""
    n = len(pre)
    slots = act.leak_fns
    ridx = np.full((n, len(slots)), -1, dtype=np.int16)
    with np.errstate(all="ignore"):
        if act is ActivationKind.EXPONENTIAL:
            y, _ = kernels.expf(pre)
            ridx[:, 0] = region_map(LeakFnKind.EXPF).lookup_batch(pre)
        elif act is ActivationKind.SIGMOID:
            y, branch, arg = mathref.logistic_batch(pre, exp_impl=lambda a: kernels.expf(a)[0])
            ridx[:, 0] = region_map(LeakFnKind.LOGISTIC).lookup_batch(pre)
            calls = branch != 2
            ridx[calls, 1] = region_map(LeakFnKind.EXPF).lookup_batch(arg[calls])
        elif act is ActivationKind.TANH:
            a, _ = kernels.expf(pre)
            b, _ = kernels.expf(-pre)
            y = ((a - b) / (a + b)).astype(np.float32)
            m = region_map(LeakFnKind.EXPF)
            ridx[:, 0] = m.lookup_batch(pre)
            ridx[:, 1] = m.lookup_batch(-pre)
        else:
            y = mathref.relu_batch(pre)
            ridx[:, 0] = region_map(slots[0]).lookup_batch(pre)
    counts = np.full(ridx.shape, -1, dtype=np.int32)
    for s, kind in enumerate(slots):
        present = ridx[:, s] >= 0
        counts[present, s] = region_map(kind).counts_of(ridx[present, s])
    return np.asarray(y, dtype=np.float32), ridx, counts


def activate(act: ActivationKind, pre) -> np.ndarray:
    return _activate(act, np.asarray(pre, dtype=np.float32))[0]


def infer(model: ModelSpec, x, *, record: bool = True):
    """Run the network on one input vector; returns (output, LeakLog)."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (model.n_inputs,):
        raise ModelError(f"input shape {x.shape} != ({model.n_inputs},)")
    log = LeakLog()
    h = x
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        pre = kernels.dense(w, b, h)
        h, ridx, counts = _activate(spec.activation, pre)
        if record:
            log.layers.append(LayerLog(spec.activation, pre, ridx, counts))
    return h, log


def forward_pre(model: ModelSpec, x, upto: int) -> np.ndarray:
    """Pre-activations of layer ``upto`` (0-based) for one input."""
    h = np.asarray(x, dtype=np.float32)
    for k in range(upto + 1):
        pre = kernels.dense(model.weights[k], model.biases[k], h)
        if k == upto:
            return pre
        h = activate(model.layers[k].activation, pre)
    raise IndexError(upto)


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "insurance": [(11, 100, ActivationKind.EXPONENTIAL), (100, 10, ActivationKind.RELU),
                  (10, 1, ActivationKind.RELU)],
    "mult": [(2, 4, ActivationKind.SIGMOID), (4, 8, ActivationKind.SIGMOID),
             (8, 1, ActivationKind.RELU)],
    "mnist": [(784, 128, ActivationKind.SIGMOID), (128, 10, ActivationKind.RELU)],
}

WEIGHT_SCALE = 0.3


def random_model(arch, seed: int, scale: float = WEIGHT_SCALE) -> ModelSpec:
    rng = np.random.default_rng(seed)
    layers = [LayerSpec(i, n, act) for i, n, act in arch]
    weights = [rng.normal(0.0, scale, (l.n_neurons, l.n_inputs)).astype(np.float32) for l in layers]
    biases = [rng.normal(0.0, scale, l.n_neurons).astype(np.float32) for l in layers]
    return ModelSpec(layers, weights, biases, seed=seed)


def preset_model(name: str, seed: int = 0) -> ModelSpec:
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return random_model(PRESETS[name], seed)


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "format": "weightleak-model/1",
        "seed": model.seed,
        "input_normalised": model.input_normalised,
        "layers": [
            {
                "n_inputs": s.n_inputs,
                "n_neurons": s.n_neurons,
                "activation": s.activation.value,
                "weights": [[hex_bits(v) for v in row] for row in w],
                "biases": [hex_bits(v) for v in b],
            }
            for s, w, b in zip(model.layers, model.weights, model.biases)
        ],
    }


def model_from_dict(d: dict) -> ModelSpec:
    try:
        layers, weights, biases = [], [], []
        for entry in d["layers"]:
            layers.append(LayerSpec(int(entry["n_inputs"]), int(entry["n_neurons"]),
                                    ActivationKind(entry["activation"])))
            rows = [[parse_hex_bits(v) for v in row] for row in entry["weights"]]
            widths = {len(r) for r in rows}
            if len(widths) > 1:
                raise ModelError("ragged weight matrix")
            weights.append(np.array(rows, dtype=np.float32).reshape(len(rows), -1 if rows else 0))
            biases.append(np.array([parse_hex_bits(v) for v in entry["biases"]], dtype=np.float32))
        return ModelSpec(layers, weights, biases, seed=int(d.get("seed", 0)),
                         input_normalised=bool(d.get("input_normalised", False)))
    except (KeyError, TypeError) as e:
        raise ModelError(f"malformed model file: {e}") from e


def save_model(model: ModelSpec, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> ModelSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"malformed model file: {e}") from e
    return model_from_dict(d)


__all__ = [
    "ActivationKind", "Interval", "LayerSpec", "ModelSpec", "ModelError", "LayerLog", "LeakLog",
    "infer", "activate", "forward_pre", "preset_model", "random_model", "PRESETS",
    "save_model", "load_model", "model_to_dict", "model_from_dict", "f32",
]
