"""First-layer recovery driver, depth sweeps, error tables and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..floats import hex_bits, parse_hex_bits
from ..victim import ActivationKind, ModelSpec
from .calibrate import LayerCalibration, calibrate_layer_input_centric
from .config import AttackConfig
from .errors import AttackError
from .oracle import Oracle
from .search import ConvergenceSet, collect_convergence_sets, verify_certificate
from .solve import solve_neuron

log = logging.getLogger("weightleak.attack")

CHECKPOINT_FORMAT = "weightleak-checkpoint/1"


@dataclass
class RecoveredLayer:
    layer: int
    activation: ActivationKind
    weights: np.ndarray
    biases: np.ndarray
    residuals: np.ndarray
    unsolved: dict = field(default_factory=dict)
    queries_used: int = 0
    phases: dict = field(default_factory=dict)
    sets: dict = field(default_factory=dict)
    calibration: LayerCalibration | None = None
    depth: int | None = None
    strategy: str = "neuron"
    stats: dict = field(default_factory=dict)
    complete: bool = True

    @property
    def n_neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def solved(self) -> np.ndarray:
        return np.array([j not in self.unsolved for j in range(self.n_neurons)])

    def params(self) -> np.ndarray:
        """(N, inputs + 1) with the bias last."""
        return np.column_stack([self.weights, self.biases])

    def signs(self) -> np.ndarray:
        return np.sign(self.weights)

    def errors(self, truth_w, truth_b) -> tuple[np.ndarray, np.ndarray]:
        """Per-parameter absolute and percent error (NaN rows for unsolved neurons)."""
        true = np.column_stack([np.asarray(truth_w, np.float64), np.asarray(truth_b, np.float64)])
        if true.shape != self.params().shape:
            raise ValueError(f"truth shape {true.shape} != recovered {self.params().shape}")
        err = np.abs(self.params() - true)
        with np.errstate(divide="ignore", invalid="ignore"):
            pct = np.where(true != 0, 100.0 * err / np.abs(true), np.nan)
        return err, pct

    def at_depth(self, depth: int) -> "RecoveredLayer":
        """Re-solve every neuron from its bracket after ``depth`` queries per set."""
        N, n = self.weights.shape
        w = np.full((N, n), np.nan)
        b = np.full(N, np.nan)
        res = np.full(N, np.nan)
        unsolved = dict(self.unsolved)
        for j, sets in self.sets.items():
            if j in self.unsolved:
                continue
            try:
                w[j], b[j], res[j] = solve_neuron(sets, depth)
            except AttackError as e:
                unsolved[j] = f"{type(e).__name__}: {e}"
        return RecoveredLayer(self.layer, self.activation, w, b, res, unsolved, self.queries_used,
                              dict(self.phases), self.sets, self.calibration, depth, self.strategy,
                              dict(self.stats), self.complete)


# ---------------------------------------------------------------------------
# error table

@dataclass
class ErrorReport:
    rows: list            # (depth, avg_abs, max_abs, avg_pct, max_pct)
    unsolved: dict        # depth -> {neuron: reason}

    COLUMNS = ("depth", "avg_abs_error", "max_abs_error", "avg_pct_error", "max_pct_error")

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS + ("unsolved",))
        for row in self.rows:
            bad = self.unsolved.get(row[0], {})
            label = "final" if row[0] is None else row[0]
            wr.writerow([label] + [repr(float(v)) for v in row[1:]] + [" ".join(map(str, sorted(bad)))])
        return buf.getvalue()

    def column(self, name: str) -> list[float]:
        i = self.COLUMNS.index(name)
        return [r[i] for r in self.rows]


def error_report(rec: RecoveredLayer, truth: ModelSpec, depths=None) -> ErrorReport:
    """Average and maximum error per search depth; unsolved neurons are left out and listed."""
    tw, tb = truth.weights[rec.layer], truth.biases[rec.layer]
    if tw.shape != rec.weights.shape:
        raise ValueError(f"truth layer shape {tw.shape} != recovered {rec.weights.shape}")
    rows, unsolved = [], {}
    for d in (depths if depths is not None else [rec.depth]):
        r = rec if d == rec.depth else rec.at_depth(d)
        err, pct = r.errors(tw, tb)
        ok = r.solved
        e, p = err[ok].ravel(), pct[ok].ravel()
        p = p[np.isfinite(p)]
        if e.size:
            rows.append((d, float(e.mean()), float(e.max()), float(p.mean()), float(p.max())))
        else:
            rows.append((d, float("nan"), float("nan"), float("nan"), float("nan")))
        unsolved[d] = dict(r.unsolved)
    return ErrorReport(rows, unsolved)


# ---------------------------------------------------------------------------
# checkpoints

def set_to_dict(cs: ConvergenceSet) -> dict:
    return {
        "inputs": [hex_bits(v) for v in cs.inputs],
        "dyn_index": cs.dyn_index,
        "lo": hex_bits(cs.lo), "hi": hex_bits(cs.hi),
        "thresholds": [float(t).hex() for t in cs.thresholds],
        "neuron": list(cs.neuron),
        "sign_known": cs.sign_known,
        "side": cs.side,
        "certified": cs.certified,
        "trail": [[hex_bits(a), hex_bits(b)] for a, b in cs.trail],
        "hidden": None if cs.hidden is None else [float(v).hex() for v in cs.hidden],
    }


def set_from_dict(d: dict) -> ConvergenceSet:
    return ConvergenceSet(
        np.array([parse_hex_bits(v) for v in d["inputs"]], dtype=np.float32),
        int(d["dyn_index"]), parse_hex_bits(d["lo"]), parse_hex_bits(d["hi"]),
        tuple(float.fromhex(t) for t in d["thresholds"]), tuple(d["neuron"]),
        bool(d["sign_known"]), int(d["side"]), bool(d["certified"]),
        [(parse_hex_bits(a), parse_hex_bits(b)) for a, b in d["trail"]],
        None if d["hidden"] is None else np.array([float.fromhex(v) for v in d["hidden"]]))


def _cal_to_dict(cal: LayerCalibration) -> dict:
    return {"sides": cal.sides.tolist(), "maxvals": [[hex_bits(v) for v in row] for row in cal.maxvals],
            "base": cal.base, "queries": cal.queries.tolist()}


def _cal_from_dict(d: dict) -> LayerCalibration:
    return LayerCalibration(np.array(d["sides"], dtype=np.int8),
                            np.array([[parse_hex_bits(v) for v in row] for row in d["maxvals"]],
                                     dtype=np.float32).reshape(len(d["sides"]), -1),
                            float(d["base"]), np.array(d["queries"], dtype=np.int64))


class Checkpoint:
    """Per-neuron progress of one recovery, written as JSON after every neuron."""

    def __init__(self, path, cfg: AttackConfig):
        self.path = Path(path) if path else None
        self.cfg = cfg
        self.calibration = None
        self.neurons: dict[int, list[ConvergenceSet]] = {}
        self.unsolved: dict[int, str] = {}
        self.counters: dict = {}
        self._lock = threading.Lock()

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": self.cfg.to_dict(),
            "calibration": None if self.calibration is None else _cal_to_dict(self.calibration),
            "neurons": {str(j): [set_to_dict(cs) for cs in sets] for j, sets in sorted(self.neurons.items())},
            "unsolved": {str(j): r for j, r in sorted(self.unsolved.items())},
            "counters": self.counters,
        }

    def save(self, o: Oracle, stats: dict) -> None:
        if self.path is None:
            return
        with self._lock:
            self.counters = {"queries": o.query_counter, "phases": dict(o.phases), **stats}
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text(json.dumps(self.to_dict(), sort_keys=True))
            tmp.replace(self.path)
        log.info("Checkpoint saved!")

    @classmethod
    def load(cls, path, cfg: AttackConfig) -> "Checkpoint":
        d = json.loads(Path(path).read_text())
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint")
        if AttackConfig.from_dict(d["config"]) != cfg:
            raise ValueError(f"{path}: checkpoint was written with a different configuration")
        ck = cls(path, cfg)
        if d["calibration"] is not None:
            ck.calibration = _cal_from_dict(d["calibration"])
        ck.neurons = {int(j): [set_from_dict(s) for s in v] for j, v in d["neurons"].items()}
        ck.unsolved = {int(j): r for j, r in d["unsolved"].items()}
        ck.counters = d["counters"]
        return ck


# ---------------------------------------------------------------------------
# driver

def _neuron_task(o: Oracle, cfg: AttackConfig, cal: LayerCalibration, j: int):
    n = o.arch[0].n_inputs
    try:
        sets = collect_convergence_sets(o, j, n + 1 + cfg.extras, cfg.depth, cal.for_neuron(j),
                                        seed=cfg.seed, base=cfg.base)
    except AttackError as e:
        return j, None, f"{type(e).__name__}: {e}", 0
    fails = 0
    if cfg.verify:
        fails = sum(not verify_certificate(o, cs) for cs in sets)
    return j, sets, None, fails


def _log_neuron(j: int, o: Oracle, cal: LayerCalibration, sets, stats) -> None:
    if not log.isEnabledFor(logging.INFO):
        return
    log.info("[ Neuron %d ]", j)
    log.info("\tstats:")
    log.info("\t\t%d executions so far", o.query_counter)
    log.info("\t\t%d Incomplete logs", o.incomplete_logs)
    log.info("\t\t%d non-deterministic steps", o.nondeterministic)
    log.info("\t\t%d neuron_check failures", stats["neuron_check_failures"])
    c = cal.for_neuron(j)
    log.info("\t\trecovered signs: %s", c.sign_string())
    log.info("\t\trecovered maxvals: %s", " ".join(f"{float(v):g}" for v in c.maxvals))
    for k, cs in enumerate(sets or (), 1):
        log.info("\t\tequation %d: input %d, depth %d, threshold %.9g", k, cs.dyn_index, cs.depth, cs.threshold)


def recover_first_layer(o: Oracle, cfg: AttackConfig, *, checkpoint=None, resume: bool = False,
                        limit: int | None = None) -> RecoveredLayer:
    """Calibrate the whole layer once, then search and solve every neuron.

    Per-neuron failures are collected in ``unsolved`` rather than aborting.
    With ``limit`` at most that many neurons are processed before returning
    an incomplete layer (the checkpoint then holds the progress).
    """
    spec = o.arch[0]
    N, n = spec.n_neurons, spec.n_inputs
    ck = Checkpoint.load(checkpoint, cfg) if resume else Checkpoint(checkpoint, cfg)
    stats = {"neuron_check_failures": 0}
    if resume:
        o.restore(ck.counters["queries"], ck.counters["phases"])
        stats["neuron_check_failures"] = ck.counters.get("neuron_check_failures", 0)
    if ck.calibration is None:
        ck.calibration = calibrate_layer_input_centric(o, 0, base=cfg.base, D=cfg.D)
        ck.save(o, stats)
    cal = ck.calibration

    pending = [j for j in range(N) if j not in ck.neurons and j not in ck.unsolved]
    if limit is not None:
        pending = pending[:limit]

    def record(result) -> None:
        j, sets, err, fails = result
        stats["neuron_check_failures"] += fails
        if err is None:
            ck.neurons[j] = sets
        else:
            ck.unsolved[j] = err
            log.warning("neuron %d unsolved: %s", j, err)
        _log_neuron(j, o, cal, sets, stats)
        ck.save(o, stats)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            for result in ex.map(lambda j: _neuron_task(o, cfg, cal, j), pending):
                record(result)
    else:
        for j in pending:
            record(_neuron_task(o, cfg, cal, j))

    w = np.full((N, n), np.nan)
    b = np.full(N, np.nan)
    res = np.full(N, np.nan)
    unsolved = dict(ck.unsolved)
    for j, sets in ck.neurons.items():
        try:
            w[j], b[j], res[j] = solve_neuron(sets)
        except AttackError as e:
            unsolved[j] = f"{type(e).__name__}: {e}"
    complete = len(ck.neurons) + len(ck.unsolved) == N
    for j in range(N):
        if j not in ck.neurons and j not in unsolved:
            unsolved[j] = "not attempted"
    stats.update(incomplete_logs=o.incomplete_logs, nondeterministic=o.nondeterministic)
    return RecoveredLayer(0, spec.activation, w, b, res, dict(sorted(unsolved.items())), o.query_counter,
                          dict(o.phases), dict(sorted(ck.neurons.items())), cal, cfg.depth, "neuron",
                          stats, complete)
