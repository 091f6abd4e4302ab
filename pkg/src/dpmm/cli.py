"""Command line entry point: ``dpmm generate|fit|eval|ablate|prior-sim``.

Configs are flat JSON objects whose keys are the field names of
:class:`SynthConfig` and :class:`TrainConfig`, plus the grid and prior
simulation keys listed in ``EXTRA_FIELDS``. One file can serve every command.

Exit codes: 0 ok, 1 undefined metric or other runtime failure, 2 config or
usage error, 3 training divergence, 4 schema mismatch.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .data import DatasetParseError, SynthConfig, load, make_benchmark, save
from .experiments import BOOTSTRAP_STREAM, prior_curves, run_cell
from .metrics import CIFailure, UndefinedMetricError, evaluate
from .model import (
    SchemaMismatch,
    TrainConfig,
    TrainingDiverged,
    fit,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)

log = logging.getLogger("dpmm")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SCHEMA = 0, 1, 2, 3, 4

GRID_AXES = ("alignment_mode", "gps_enabled", "fusion_mode", "weights", "missing_ratio")
# key -> (expected JSON type, default)
EXTRA_FIELDS = {
    "grid_alignment_mode": (list, None),
    "grid_gps_enabled": (list, None),
    "grid_fusion_mode": (list, None),
    "grid_weights": (list, None),
    "grid_missing_ratio": (list, None),
    "grid_seeds": (list, None),
    "bootstrap": (int, 1000),
    "workers": (int, 1),
    "eta_list": (list, [0.1, 0.5, 1.0, 2.0, 5.0]),
    "MK": (int, 20),
    "draws": (int, 10000),
}
SPLITS = ("train", "valid", "test")


class ConfigError(ValueError):
    pass


def version_string() -> str:
    return f"v{__version__}-0-gdpmm"


# ---------------------------------------------------------------- config


def _field_types(cls) -> dict:
    return {f.name: type(f.default) for f in fields(cls)}


def _check_type(key, value, kind):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind in (tuple, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__}")


def read_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    known = {**_field_types(SynthConfig), **_field_types(TrainConfig),
             **{k: t for k, (t, _) in EXTRA_FIELDS.items()}}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{key}: unknown config field")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested values are not allowed")
        _check_type(key, value, known[key])
    return raw


def _build(cls, raw: dict, seed=None):
    values = {}
    for f in fields(cls):
        if f.name not in raw:
            raise ConfigError(f"{f.name}: missing required field")
        values[f.name] = raw[f.name]
    if seed is not None:
        values["seed"] = seed
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def synth_config(raw, seed=None) -> SynthConfig:
    return _build(SynthConfig, raw, seed)


def train_config(raw, seed=None) -> TrainConfig:
    return _build(TrainConfig, raw, seed)


def _extra(raw, key):
    return raw.get(key, EXTRA_FIELDS[key][1])


def manifest(command: str, config: dict, seed, wall_clock: float | None = None, **extra) -> dict:
    out = {"tool": "dpmm", "version": version_string(), "command": command, "seed": seed, "config": config}
    out.update(extra)
    if wall_clock is not None:
        out["wall_clock_s"] = round(wall_clock, 3)
    return out


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header_manifest: dict, columns, rows):
    buf = io.StringIO()
    buf.write("# manifest: " + json.dumps(header_manifest, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_results_csv(path) -> list:
    """Rows of a CSV written by this tool, skipping the manifest header."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------- commands


def cmd_generate(config_path, out_dir, seed=None) -> dict:
    raw = read_config(config_path)
    cfg = synth_config(raw, seed)
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = make_benchmark(cfg)
    for name, ds in zip(SPLITS, parts):
        save(ds, out / f"{name}.jsonl")
    sizes = {name: len(ds) for name, ds in zip(SPLITS, parts)}
    _dump_json(manifest("generate", cfg.to_dict(), cfg.seed, time.perf_counter() - t0, sizes=sizes),
               out / "manifest.json")
    return sizes


def cmd_fit(config_path, data_dir, out_dir, seed=None) -> dict:
    raw = read_config(config_path)
    cfg = train_config(raw, seed)
    data = Path(data_dir)
    train, valid = (load(data / f"{name}.jsonl") for name in ("train", "valid"))
    t0 = time.perf_counter()
    state, history = fit(train, valid, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "checkpoint.json")
    columns = ["epoch", "task", "dp", "align", "kl_sticks", "loss", "valid_auroc"]
    man = manifest("fit", cfg.to_dict(), cfg.seed, time.perf_counter() - t0,
                   best_valid_auroc=getattr(state, "best_valid_auroc", None), epochs_run=len(history))
    _write_csv(out / "history.csv", man, columns, [[row[c] for c in columns] for row in history])
    _dump_json({**man, "history": history}, out / "manifest.json")
    return man


def cmd_eval(checkpoint, data_file, out_path, seed=None, bootstrap: int = 1000) -> dict:
    state = load_checkpoint(checkpoint)
    ds = load(data_file)
    if ds.dims != state.dims:
        raise SchemaMismatch(f"data dims {list(ds.dims)} do not match checkpoint dims {list(state.dims)}")
    seed = state.config.seed if seed is None else seed
    scores = predict_proba(ds, state)
    metrics = evaluate(scores, ds.labels, B=bootstrap, seed=[seed, BOOTSTRAP_STREAM],
                       threshold=state.config.f1_threshold)
    # no wall-clock here: evaluation output is byte-stable
    metrics["manifest"] = manifest("eval", state.config.to_dict(), seed, bootstrap=bootstrap,
                                   checkpoint=Path(checkpoint).name, data=Path(data_file).name, n=len(ds))
    _dump_json(metrics, out_path)
    return metrics


def _grid(raw, base_train: TrainConfig, base_synth: SynthConfig):
    axes = {}
    for axis in GRID_AXES:
        values = raw.get(f"grid_{axis}")
        if values is None:
            values = [max(base_synth.missing_ratio)] if axis == "missing_ratio" else [getattr(base_train, axis)]
        if not values:
            raise ConfigError(f"grid_{axis}: empty grid axis")
        axes[axis] = values
    seeds = raw.get("grid_seeds") or [base_train.seed]
    return [dict(zip(GRID_AXES, combo), seed=s) for combo in itertools.product(*axes.values()) for s in seeds]


def _ablate_cell(args):
    cell, synth, train, bootstrap = args
    try:
        tcfg = replace(train, seed=cell["seed"], **{k: cell[k] for k in GRID_AXES if k != "missing_ratio"})
        scfg = replace(synth, seed=cell["seed"])
        res = run_cell(scfg, tcfg, missing_ratio=float(cell["missing_ratio"]), bootstrap=bootstrap)
        m = res.metrics
        return ["ok", m["auroc"], m["aupr"], m["f1"], *m["ci"]["auroc"], len(res.history), ""]
    except Exception as exc:  # a failed cell is recorded and the grid continues
        return [f"error:{type(exc).__name__}", "", "", "", "", "", "", str(exc).replace("\n", " ")]


def cmd_ablate(config_path, out_dir, seed=None, workers=None) -> list:
    raw = read_config(config_path)
    train = train_config(raw, seed)
    synth = synth_config(raw, seed)
    cells = _grid(raw, train, synth)
    bootstrap = _extra(raw, "bootstrap")
    workers = workers or _extra(raw, "workers")
    t0 = time.perf_counter()
    jobs = [(c, synth, train, bootstrap) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = [_ablate_cell(j) for j in jobs]
    columns = [*GRID_AXES, "seed", "status", "auroc", "aupr", "f1", "auroc_lo", "auroc_hi", "epochs_run", "error"]
    rows = [[*(c[a] for a in GRID_AXES), c["seed"], *r] for c, r in zip(cells, results)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = manifest("ablate", {**synth.to_dict(), **train.to_dict(),
                              **{k: raw[k] for k in EXTRA_FIELDS if k in raw}},
                   train.seed, time.perf_counter() - t0, cells=len(cells))
    _write_csv(out / "ablation.csv", man, columns, rows)
    return rows


def cmd_prior_sim(config_path, out_path, seed=None) -> list:
    raw = read_config(config_path)
    seed = raw.get("seed", 0) if seed is None else seed
    eta_list, MK, draws = _extra(raw, "eta_list"), _extra(raw, "MK"), _extra(raw, "draws")
    try:
        rows = prior_curves(eta_list, MK, draws, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    man = manifest("prior-sim", {"eta_list": eta_list, "MK": MK, "draws": draws}, seed)
    _write_csv(out_path, man, ["eta", "r", "mean", "se", "expected"], rows)
    return rows


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write train/valid/test dataset files")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    f = sub.add_parser("fit", help="train a model on generated data")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True, help="directory holding train.jsonl and valid.jsonl")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="score a dataset file with a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset file")
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.add_argument("--seed", type=int)
    e.add_argument("--config", help="optional config; only 'bootstrap' is read")

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--workers", type=int)

    s = sub.add_parser("prior-sim", help="Monte-Carlo prior weight curves")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--seed", type=int)
    return p


def _run(args):
    if args.command == "generate":
        sizes = cmd_generate(args.config, args.out, args.seed)
        print(json.dumps(sizes))
    elif args.command == "fit":
        man = cmd_fit(args.config, args.data, args.out, args.seed)
        print(f"best valid AUROC {man['best_valid_auroc']:.4f} after {man['epochs_run']} epochs")
    elif args.command == "eval":
        bootstrap = _extra(read_config(args.config), "bootstrap") if args.config else 1000
        m = cmd_eval(args.checkpoint, args.data, args.out, args.seed, bootstrap)
        print(f"auroc {m['auroc']:.4f} aupr {m['aupr']:.4f} f1 {m['f1']:.4f}")
    elif args.command == "ablate":
        rows = cmd_ablate(args.config, args.out, args.seed, args.workers)
        failed = sum(1 for r in rows if r[len(GRID_AXES) + 1] != "ok")
        print(f"{len(rows)} cells, {failed} failed")
    elif args.command == "prior-sim":
        rows = cmd_prior_sim(args.config, args.out, args.seed)
        print(f"{len(rows)} rows")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc.component} (step {exc.step})", file=sys.stderr)
        return EXIT_DIVERGED
    except (SchemaMismatch, DatasetParseError) as exc:
        print(f"schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except (UndefinedMetricError, CIFailure) as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
