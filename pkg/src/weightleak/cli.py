"""Command-line front end: one subcommand per process.

Exit codes: 0 success, 2 usage or bad input file, 3 some neurons unsolved,
4 trace rejected by the parser. Every flag can also be set through an
environment variable ``WEIGHTLEAK_<FLAG>`` (e.g. ``WEIGHTLEAK_DEPTH=20``);
an explicit flag wins over the environment, which wins over ``--config``.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import math
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import kernels
from .attack import (AttackConfig, ConfigError, Oracle, error_report, grid_search_deeper, input_centric_recover,
                     query_budget_estimate, recover_first_layer, solve_deeper)
from .attack.errors import AttackError
from .leakmodel import LeakFnKind, derive_region_map
from .trace import DEFAULT_LAYOUT, PageLayout, TraceError, TraceLog, emit_trace, parse_trace
from .victim import PRESETS, ModelError, infer, load_model, preset_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_UNSOLVED, EXIT_TRACE = 0, 2, 3, 4
ENV_PREFIX = "WEIGHTLEAK_"

# flag name -> AttackConfig field
_CONFIG_FLAGS = {"seed": "seed", "depth": "depth", "extras": "extras", "strategy": "strategy",
                 "oracle": "oracle", "min_gap": "min_gap"}

# parameters quoted for the 784-128 digit classifier
MNIST_BUDGET = {"P": 785, "N": 128, "S": 55, "D": 18}

log = logging.getLogger("weightleak")


class UsageError(Exception):
    pass


def _tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper())


def _flag(args, name: str, default=None):
    """Explicit flag, then environment, then ``default``."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    e = _env(name)
    return e if e is not None else default


def _model_arg(path):
    try:
        return load_model(path)
    except FileNotFoundError as e:
        raise UsageError(f"model file not found: {path}") from e


def _read_inputs(path, n_inputs: int) -> list[np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for line in csv.reader(fh):
            if not line or line[0].lstrip().startswith("#"):
                continue
            try:
                row = np.array([float(v) for v in line], dtype=np.float32)
            except ValueError as e:
                raise UsageError(f"{path}: non-numeric input value") from e
            if row.shape != (n_inputs,):
                raise UsageError(f"{path}: expected {n_inputs} values per row, got {row.shape[0]}")
            rows.append(row)
    if not rows:
        raise UsageError(f"{path}: no input rows")
    return rows


def _layout(args) -> PageLayout:
    off = int(_flag(args, "fusion_offset", 0))
    return PageLayout(fusion_offset=off) if off else DEFAULT_LAYOUT


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_model(args) -> int:
    seed = int(_flag(args, "seed", 0))
    out = _flag(args, "out")
    if not out:
        raise UsageError("gen-model needs --out")
    try:
        m = preset_model(args.name, seed)
    except ModelError as e:
        raise UsageError(str(e)) from e
    save_model(m, out)
    print(f"wrote {args.name} (seed {seed}) to {out}")
    return EXIT_OK


def cmd_trace(args) -> int:
    m = _model_arg(args.model)
    rows = _read_inputs(args.inputs, m.n_inputs)
    out = _flag(args, "out")
    if not out:
        raise UsageError("trace needs --out")
    if len(rows) > 1 and "{i}" not in out:
        raise UsageError("several input rows need an --out pattern containing {i}")
    layout = _layout(args)
    for i, x in enumerate(rows):
        _, leak = infer(m, x)
        path = out.format(i=i)
        emit_trace(leak, layout).save(path)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_parse(args) -> int:
    m = _model_arg(args.model)
    try:
        parsed = parse_trace(TraceLog.load(args.trace), _layout(args), list(m.layers))
    except TraceError as e:
        print(f"trace rejected: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_TRACE
    for k, layer in enumerate(parsed):
        for i, pn in enumerate(layer):
            regions = " ".join("|".join(sorted(r.label for r in c)) for c in pn.candidates)
            counts = " ".join(map(str, pn.counts))
            print(f"layer {k} neuron {i}: {pn.variant} counts [{counts}] regions {regions}")
    return EXIT_OK


def _config(args) -> AttackConfig:
    cfg = AttackConfig.load(args.config) if getattr(args, "config", None) else AttackConfig()
    overrides = {}
    for flag, fieldname in _CONFIG_FLAGS.items():
        v = _flag(args, flag)
        if v is not None:
            overrides[fieldname] = v
    w = _flag(args, "workers")
    if w is not None:
        overrides["workers"] = w
    return AttackConfig.from_dict({**cfg.to_dict(), **overrides})


def _recovered_to_dict(rec, cfg: AttackConfig) -> dict:
    def num(v):
        return None if not math.isfinite(v) else float(v)

    return {
        "format": "weightleak-recovered/1",
        "layer": rec.layer,
        "activation": rec.activation.value,
        "strategy": rec.strategy,
        "config": cfg.to_dict(),
        "weights": [[num(v) for v in row] for row in rec.weights],
        "biases": [num(v) for v in rec.biases],
        "residuals": [num(v) for v in rec.residuals],
        "unsolved": {str(j): r for j, r in rec.unsolved.items()},
        "queries_used": rec.queries_used,
        "phases": dict(sorted(rec.phases.items())),
        "stats": dict(sorted(rec.stats.items())),
    }


def _write_manifest(out_dir: Path, argv, cfg: AttackConfig | None, model_path, outputs, extra: dict,
                    started: str) -> None:
    manifest = {
        "format": "weightleak-manifest/1",
        "tool_version": _tool_version(),
        "kernel_backend": kernels.BACKEND,
        "argv": list(argv),
        "config": None if cfg is None else cfg.to_dict(),
        "seeds": {"attack": None if cfg is None else cfg.seed, "model": load_model(model_path).seed},
        "region_maps": {k.value: hashlib.sha256(derive_region_map(k).dumps().encode()).hexdigest()
                        for k in LeakFnKind},
        "model": {"path": str(model_path), "sha256": _sha256(model_path)},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_attack(args, argv) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    m = _model_arg(args.model)
    cfg = _config(args)
    out = _flag(args, "out")
    if not out:
        raise UsageError("attack needs --out")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    o = Oracle(m, cfg.oracle, layout=_layout(args))
    ck = out_dir / "checkpoint.json"
    try:
        if cfg.strategy == "input":
            rec = input_centric_recover(o, 0, cfg.min_gap, cfg)
        else:
            rec = recover_first_layer(o, cfg, checkpoint=ck, resume=args.resume and ck.exists())
    except TraceError as e:
        print(f"trace rejected: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_TRACE
    outputs = []
    rp = out_dir / "recovered.json"
    rp.write_text(json.dumps(_recovered_to_dict(rec, cfg), indent=1, sort_keys=True) + "\n")
    outputs.append(rp)
    depths = report_depths(cfg.depth) if cfg.strategy == "neuron" else [None]
    rep = error_report(rec, m, depths)
    ep = out_dir / "errors.csv"
    ep.write_text(rep.to_csv())
    outputs.append(ep)
    extra = {"queries": rec.queries_used}

    if args.deeper:
        dp = out_dir / "deeper.json"
        dp.write_text(json.dumps(_deeper(o, rec, cfg), indent=1, sort_keys=True) + "\n")
        outputs.append(dp)
        extra["queries"] = o.query_counter

    if cfg.strategy == "neuron":
        outputs.append(ck)
    _write_manifest(out_dir, argv, cfg, args.model, outputs, extra, started)

    print(f"{o.query_counter} executions")
    print(f"{o.incomplete_logs} incomplete logs")
    print(f"{o.nondeterministic} non-deterministic steps")
    print(f"{rec.stats.get('neuron_check_failures', 0)} neuron_check failures")
    row = rep.rows[0]
    print(f"avg abs error {row[1]:.6g}, max abs error {row[2]:.6g}, avg % error {row[3]:.6g}")
    if rec.unsolved:
        for j, why in rec.unsolved.items():
            print(f"neuron {j} unsolved: {why}", file=sys.stderr)
        return EXIT_UNSOLVED
    return EXIT_OK


def report_depths(depth: int) -> list[int]:
    """Depths 5, 10, ... up to ``depth``, always ending at ``depth``."""
    ds = list(range(5, depth, 5))
    return ds + [depth]


def _deeper(o: Oracle, rec, cfg: AttackConfig) -> dict:
    """Grid-search every neuron of the second layer; report sets and the solve decision."""
    if len(o.arch) < 2:
        return {"layer": 1, "neurons": {}, "note": "model has a single layer"}
    n_unknowns = o.arch[1].n_inputs + 1
    report = {}
    for j in range(o.arch[1].n_neurons):
        entry = {}
        try:
            sets = grid_search_deeper(o, [rec], 1, j, cfg.grid_resolution, cfg.grid_span,
                                      n_scans=cfg.grid_scans, seed=cfg.seed)
            entry["sets"] = len(sets)
            entry["signless"] = sum(not cs.sign_known for cs in sets)
            try:
                w, b, res = solve_deeper(sets, n_unknowns)
                entry.update(weights=list(map(float, w)), bias=b, residual=res)
            except AttackError as e:
                entry["declined"] = f"{type(e).__name__}: {e}"
        except AttackError as e:
            entry["error"] = f"{type(e).__name__}: {e}"
        report[str(j)] = entry
        print(f"layer 1 neuron {j}: " + ", ".join(f"{k}={v}" for k, v in entry.items()
                                                   if k in ("sets", "signless", "declined", "error")))
    return {"layer": 1, "neurons": report}


def _parse_depths(text: str) -> list[int]:
    try:
        if ":" in text:
            a, b, step = (int(v) for v in text.split(":"))
            return list(range(a, b + 1, step))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"bad depth list {text!r}; use 5,10,15 or 5:55:5") from e


def cmd_sweep(args, argv) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    m = _model_arg(args.model)
    depths = _parse_depths(args.depths)
    if not depths or min(depths) < 0:
        raise UsageError("depths must be non-negative")
    cfg = _config(args).replace(depth=max(depths), strategy="neuron")
    out = _flag(args, "out")
    if not out:
        raise UsageError("sweep needs --out")
    o = Oracle(m, cfg.oracle, layout=_layout(args))
    rec = recover_first_layer(o, cfg)
    rep = error_report(rec, m, depths)
    Path(out).write_text(rep.to_csv())
    sys.stdout.write(rep.to_csv())
    _write_manifest(Path(out).parent, argv, cfg, args.model, [Path(out)], {"queries": rec.queries_used}, started)
    return EXIT_UNSOLVED if rec.unsolved else EXIT_OK


def cmd_budget(args) -> int:
    vals = dict(MNIST_BUDGET) if args.mnist else {}
    for k in ("P", "N", "S", "D"):
        v = getattr(args, k)
        if v is not None:
            vals[k] = v
    missing = [k for k in ("P", "N", "S", "D") if k not in vals]
    if missing:
        raise UsageError(f"budget needs {', '.join('-' + k for k in missing)} (or --mnist)")
    extras = int(_flag(args, "extras", 0))
    try:
        b = query_budget_estimate(vals["P"], vals["N"], vals["S"], vals["D"], extras)
    except ValueError as e:
        raise UsageError(str(e)) from e
    print(f"P={b.P} N={b.N} S={b.S} D={b.D} extras={b.extras}")
    print(f"neuron-centric search Q = {b.Q:,}")
    print(f"calibration C = {b.C:,}")
    print(f"neuron-centric total Q + C = {b.total:,}")
    if args.per_equation is not None:
        print(f"input-centric projection = {b.input_centric(args.per_equation):,}")
    print(f"reference budget (100 per parameter) = {b.tramer:,}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true", help="per-neuron progress log")

    attack_opts = argparse.ArgumentParser(add_help=False)
    attack_opts.add_argument("--config", help="attack configuration (JSON)")
    attack_opts.add_argument("--depth", type=int)
    attack_opts.add_argument("--extras", type=int)
    attack_opts.add_argument("--strategy", choices=["neuron", "input"])
    attack_opts.add_argument("--oracle", choices=["direct", "trace"])
    attack_opts.add_argument("--min-gap", dest="min_gap", type=float)
    attack_opts.add_argument("--workers", type=int)

    layout_opts = argparse.ArgumentParser(add_help=False)
    layout_opts.add_argument("--fusion-offset", dest="fusion_offset", type=int,
                             help="instructions a fused build adds to every libm run")

    p = argparse.ArgumentParser(prog="weightleak", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", parents=[common], help="write a seeded preset model")
    g.add_argument("name", help=f"one of {', '.join(sorted(PRESETS))}")

    t = sub.add_parser("trace", parents=[common, layout_opts], help="emit page traces for CSV inputs")
    t.add_argument("model")
    t.add_argument("inputs", help="CSV file, one input vector per row")

    pa = sub.add_parser("parse", parents=[common, layout_opts], help="decode a trace into per-neuron regions")
    pa.add_argument("model")
    pa.add_argument("trace")

    a = sub.add_parser("attack", parents=[common, attack_opts, layout_opts], help="recover the first layer")
    a.add_argument("model")
    a.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")
    a.add_argument("--deeper", action="store_true", help="grid-search the second layer afterwards")

    s = sub.add_parser("sweep", parents=[common, attack_opts, layout_opts], help="error table across depths")
    s.add_argument("model")
    s.add_argument("--depths", default="5:55:5", help="comma list or start:stop:step")

    b = sub.add_parser("budget", parents=[common], help="query-count formulas")
    for k in ("P", "N", "S", "D"):
        b.add_argument(f"-{k}", type=int)
    b.add_argument("--extras", type=int)
    b.add_argument("--per-equation", dest="per_equation", type=int,
                   help="measured executions for one input-centric equation")
    b.add_argument("--mnist", action="store_true", help="784-128 digit classifier: P=785 N=128 S=55 D=18")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        if args.command == "gen-model":
            return cmd_gen_model(args)
        if args.command == "trace":
            return cmd_trace(args)
        if args.command == "parse":
            return cmd_parse(args)
        if args.command == "attack":
            return cmd_attack(args, argv)
        if args.command == "sweep":
            return cmd_sweep(args, argv)
        return cmd_budget(args)
    except (UsageError, ModelError, ConfigError, ValueError) as e:
        print(f"weightleak {args.command}: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
