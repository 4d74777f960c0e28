"""Command-line harness: generate, train, eval, sweep, diagnose.

Every subcommand writes under ``--out``. Failures exit nonzero after printing
a single JSON line ``{"error": <kind>, "message": <text>}`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from .estimator import METRIC_FIELDS, SetPredictionDetector, TrainingDiverged
from .evalkit import average_precision, duplicate_rate, nms, write_detections
from .querystats import histogram_distance, write_distance_series, write_positions
from .scenes import (SceneParams, dataset_hash, load_dataset, make_split, save_dataset)

logger = logging.getLogger("grouplab")

DEFAULT_SWEEP_K = [1, 2, 3, 5, 7, 11]
DEFAULT_SEEDS = [0, 1, 2]
SCENE_SEED = 7
TRAIN_COUNT, VAL_COUNT = 2000, 500
VAL_START = 1_000_000  # val scene ids never collide with train ids
CHECKPOINT_RE = re.compile(r"epoch_(\d+)\.ckpt$")

EXIT_CODES = {"ConfigError": 2, "DataError": 3, "TrainingDiverged": 4, "CheckpointError": 5,
              "RuntimeError": 1}


class LabError(Exception):
    kind = "RuntimeError"


class ConfigError(LabError):
    kind = "ConfigError"


class DataError(LabError):
    kind = "DataError"


class CheckpointError(LabError):
    kind = "CheckpointError"


# ---------------------------------------------------------------------------
# configuration


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def estimator_params(cfg, args=None):
    """Estimator keyword arguments from the config plus command-line overrides."""
    known = SetPredictionDetector().get_params()
    params = {k: v for k, v in cfg.items() if k in known}
    if args is not None:
        if getattr(args, "k", None) is not None:
            params["num_groups"] = args.k
            params.setdefault("strategy", "group_wise")
        if getattr(args, "multiplicity", None) is not None:
            params["multiplicity"] = args.multiplicity
            params.setdefault("strategy", "one_to_many")
        if getattr(args, "epochs", None) is not None:
            params["epochs"] = args.epochs
        if getattr(args, "seed", None) is not None:
            params["random_state"] = args.seed
    est = SetPredictionDetector(**params)
    try:
        est._validate_params()
        est.group_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return params


def scene_params(cfg):
    try:
        return SceneParams.from_dict(cfg.get("scene_params", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene_params: {exc}") from None


def _load(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def datasets(cfg, need_train=True):
    """(train, val) scenes: from ``data_dir`` / explicit paths, else generated in memory."""
    data_dir = cfg.get("data_dir")
    train_path = cfg.get("train_path") or (data_dir and str(Path(data_dir) / "train.jsonl"))
    val_path = cfg.get("val_path") or (data_dir and str(Path(data_dir) / "val.jsonl"))
    params = scene_params(cfg)
    seed = cfg.get("scene_seed", SCENE_SEED)
    if need_train:
        train = _load(train_path) if train_path else make_split(
            seed, 0, cfg.get("train_count", TRAIN_COUNT), params)
    else:
        train = None
    val = _load(val_path) if val_path else make_split(
        seed, VAL_START, cfg.get("val_count", VAL_COUNT), params)
    return train, val


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(v):
    """NaN is not valid JSON; report it as null."""
    return None if isinstance(v, float) and math.isnan(v) else v


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, cfg):
    out = Path(args.out)
    seed = args.seed if args.seed is not None else cfg.get("scene_seed", SCENE_SEED)
    n_train = int(cfg.get("train_count", TRAIN_COUNT))
    n_val = int(cfg.get("val_count", VAL_COUNT))
    if n_train < 1 or n_val < 1:
        raise ConfigError("train_count and val_count must be >= 1")
    params = scene_params(cfg)
    train = make_split(seed, 0, n_train, params)
    val = make_split(seed, VAL_START, n_val, params)
    try:
        save_dataset(train, out / "train.jsonl", params, meta={"seed": seed, "split": "train"})
        save_dataset(val, out / "val.jsonl", params, meta={"seed": seed, "split": "val"})
    except OSError as exc:
        raise DataError(f"cannot write dataset under {out}: {exc.strerror}") from None
    report = {"command": "generate", "seed": seed, "params": dataclasses.asdict(params),
              "train": {"path": str(out / "train.jsonl"), "count": n_train,
                        "sha256": dataset_hash(train),
                        "truncated": sum(s.truncated for s in train)},
              "val": {"path": str(out / "val.jsonl"), "count": n_val,
                      "sha256": dataset_hash(val), "truncated": sum(s.truncated for s in val)}}
    write_json(out / "report.json", report)
    return report


class _MetricsWriter:
    """Appends one row per epoch and flushes, so a halted run keeps its history."""

    def __init__(self, path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.f = open(path, "w", newline="")
        self.w = csv.DictWriter(self.f, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        self.w.writeheader()
        self.f.flush()

    def row(self, row):
        self.w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})
        self.f.flush()

    def close(self):
        self.f.close()


def train_run(params, train, val, out):
    """Fit one estimator, writing metrics, per-epoch checkpoints and final diagnostics."""
    out = Path(out)
    ckpt_dir = out / "checkpoints"
    metrics = _MetricsWriter(out / "metrics.csv")
    est = SetPredictionDetector(**params)

    def on_epoch(epoch, e):
        metrics.row(e.history_[-1])
        e.save(ckpt_dir / f"epoch_{epoch:03d}.ckpt")

    try:
        est.fit(train, eval_set=val, callback=on_epoch)
    finally:
        metrics.close()
    est.save(ckpt_dir / "final.ckpt")
    final = est.history_[-1]
    if est.num_groups > 1:
        write_positions(est.positions_, out / "diagnostics" / "positions_final.csv")
    if est.num_groups > 1 and "pd" in final:
        write_distance_series([(r["epoch"], r["pd"], r["md"]) for r in est.history_],
                              out / "diagnostics" / "pd_md.csv")
    return est, {k: _clean(v) for k, v in final.items()}


def cmd_train(args, cfg):
    params = estimator_params(cfg, args)
    train, val = datasets(cfg)
    out = Path(args.out)
    try:
        est, final = train_run(params, train, val, out)
    except TrainingDiverged as exc:
        write_json(out / "report.json", {"command": "train", "status": "diverged",
                                         "message": str(exc), "params": params})
        raise
    report = {"command": "train", "status": "ok", "params": est.get_params(),
              "final": final, "checkpoint": str(out / "checkpoints" / "final.ckpt"),
              "metrics": str(out / "metrics.csv")}
    write_json(out / "report.json", report)
    return report


def _checkpoint_path(args, cfg):
    path = args.checkpoint or cfg.get("checkpoint")
    if not path:
        raise ConfigError("no checkpoint given (use --checkpoint or the 'checkpoint' key)")
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


def load_estimator(path, cfg=None):
    try:
        est = SetPredictionDetector.load(path)
    except (ValueError, KeyError, OSError) as exc:
        raise CheckpointError(str(exc)) from None
    if cfg:
        stored = est.get_params()
        clash = {k: (v, stored[k]) for k, v in cfg.items()
                 if k in stored and k in _ARCH_KEYS and stored[k] != v}
        if clash:
            detail = ", ".join(f"{k}: config {a!r} vs checkpoint {b!r}"
                               for k, (a, b) in sorted(clash.items()))
            raise CheckpointError(f"config does not match checkpoint ({detail})")
    return est


_ARCH_KEYS = {"strategy", "num_groups", "multiplicity", "num_queries", "num_classes", "d_model",
              "heads", "layers", "ffn_dim", "memory_tokens"}


def evaluate_checkpoint(est, scenes, group=0, apply_nms=True, dump_path=None):
    group = est.inference_group if group is None else group
    try:
        raw = est.predict(scenes, group=group)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dets = nms(raw, est.nms_threshold) if apply_nms else raw
    ap = average_precision(dets, scenes)
    report = {"mAP": ap.mAP, "per_class_AP": {str(k): v for k, v in ap.per_class.items()},
              "per_threshold_mAP": {f"{k:.2f}": v for k, v in ap.per_threshold.items()},
              "duplicate_rate": duplicate_rate(raw, est.score_threshold, est.nms_threshold),
              "nms": apply_nms, "group": group, "num_scenes": len(scenes),
              "num_detections": len(dets)}
    if dump_path is not None:
        write_detections(dets, dump_path)
        report["detections"] = str(dump_path)
    return report


def cmd_eval(args, cfg):
    expect = dict(cfg)
    if args.k is not None:
        expect["num_groups"] = args.k
    if args.multiplicity is not None:
        expect["multiplicity"] = args.multiplicity
    est = load_estimator(_checkpoint_path(args, cfg), expect)
    _, val = datasets(cfg, need_train=False)
    out = Path(args.out)
    group = args.group_index if args.group_index is not None else est.inference_group
    report = evaluate_checkpoint(est, val, group, apply_nms=not args.no_nms,
                                 dump_path=out / "diagnostics" / "detections.csv")
    report.update(command="eval", checkpoint=str(_checkpoint_path(args, cfg)))
    write_json(out / "report.json", report)
    return report


def _sweep_axis(cfg, args):
    axis = cfg.get("sweep_axis", "multiplicity" if args.multiplicity is not None else "k")
    if axis not in ("k", "multiplicity", "num_queries"):
        raise ConfigError(f"sweep_axis must be k, multiplicity or num_queries, got {axis!r}")
    values = cfg.get("sweep_values")
    if values is None:
        if axis == "k":
            values = [args.k] if args.k is not None else DEFAULT_SWEEP_K
        elif axis == "multiplicity":
            values = [args.multiplicity] if args.multiplicity is not None else [1, 2, 3]
        else:
            values = [cfg.get("num_queries", 20)]
    if not values or any(int(v) != v or v < 1 for v in values):
        raise ConfigError(f"sweep values must be positive integers, got {values}")
    return axis, [int(v) for v in values]


def _axis_params(base, axis, value):
    p = dict(base)
    if axis == "k":
        # K = 1 under group-wise matching is plain one-to-one
        p.update(strategy="group_wise", num_groups=value, multiplicity=1)
    elif axis == "multiplicity":
        p.update(strategy="one_to_many", multiplicity=value, num_groups=1)
    else:
        p["num_queries"] = value
    return p


SWEEP_FIELDS = ["axis", "value", "seed", "status", "map_no_nms", "map_nms", "duplicate_rate"]


def cmd_sweep(args, cfg):
    base = {k: v for k, v in cfg.items() if k in SetPredictionDetector().get_params()}
    if args.epochs is not None:
        base["epochs"] = args.epochs
    axis, values = _sweep_axis(cfg, args)
    seeds = [args.seed] if args.seed is not None else cfg.get("seeds", DEFAULT_SEEDS)
    train, val = datasets(cfg)
    out = Path(args.out)
    rows = []
    for value in values:
        for seed in seeds:
            params = {**_axis_params(base, axis, value), "random_state": seed}
            run_dir = out / "runs" / f"{axis}={value}" / f"seed={seed}"
            row = {"axis": axis, "value": value, "seed": seed}
            try:
                SetPredictionDetector(**params)._validate_params()
                est, _ = train_run(params, train, None, run_dir)
                row.update(est.evaluate(val), status="ok")
            except Exception as exc:  # recorded, sweep continues
                logger.warning("sweep run %s=%s seed=%s failed: %s", axis, value, seed, exc)
                row.update(status=f"failed: {type(exc).__name__}: {exc}")
            rows.append(row)
            _write_sweep(rows, out / "metrics.csv")
    summary = _summarise(rows, values)
    _write_sweep(rows + summary, out / "metrics.csv")
    means = {r["value"]: r for r in summary if r["seed"] == "mean"}
    report = {"command": "sweep", "axis": axis, "values": values, "seeds": seeds,
              "failed_runs": sum(r["status"] != "ok" for r in rows),
              "summary": [{k: _clean(v) for k, v in r.items()} for r in summary]}
    if axis == "k" and 1 in means and 3 in means:
        report["map_k3_above_k1"] = bool(means[3]["map_no_nms"] > means[1]["map_no_nms"])
    if axis == "multiplicity":
        report["nms_gap"] = {str(v): _clean(m["map_nms"] - m["map_no_nms"]) for v, m in means.items()}
    write_json(out / "report.json", report)
    return report


def _summarise(rows, values):
    out = []
    for value in values:
        ok = [r for r in rows if r["value"] == value and r["status"] == "ok"]
        for stat, fn in (("mean", np.mean), ("std", lambda x: np.std(x, ddof=1) if len(x) > 1 else 0.0)):
            row = {"axis": rows[0]["axis"], "value": value, "seed": stat, "status": f"n={len(ok)}"}
            for k in ("map_no_nms", "map_nms", "duplicate_rate"):
                row[k] = float(fn([r[k] for r in ok])) if ok else float("nan")
            out.append(row)
    return out


def _write_sweep(rows, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SWEEP_FIELDS})


def cmd_diagnose(args, cfg):
    ckpt_dir = Path(args.checkpoint_dir or cfg.get("checkpoint_dir") or "")
    if not ckpt_dir.is_dir():
        raise CheckpointError(f"checkpoint directory not found: {ckpt_dir}")
    found = sorted((int(m.group(1)), p) for p in ckpt_dir.iterdir()
                   if (m := CHECKPOINT_RE.search(p.name)))
    if not found:
        raise CheckpointError(f"no epoch_NNN.ckpt files in {ckpt_dir}")
    expected = list(range(1, found[-1][0] + 1))
    missing = sorted(set(expected) - {e for e, _ in found})
    warnings = []
    if missing:
        warnings.append(f"missing checkpoints for epochs {missing}; series is partial")
        logger.warning(warnings[-1])
    _, val = datasets(cfg, need_train=False)
    scenes = val[: int(cfg.get("diagnostic_scenes", 200))]
    out = Path(args.out) / "diagnostics"
    series, last = [], None
    for epoch, path in found:
        est = load_estimator(path)
        if est.model_.config.num_groups < 2:
            raise ConfigError("diagnose needs a group-wise checkpoint with at least 2 groups")
        d = est.query_distances(scenes)
        series.append((epoch, d["pd"], d["md"]))
        write_positions(est.positions_, out / f"positions_epoch_{epoch:03d}.csv")
        last = est
    write_distance_series(series, out / "pd_md.csv")
    pos = last.positions_
    rng = np.random.default_rng(0)
    pairs = [(g, h) for g in range(len(pos)) for h in range(g + 1, len(pos))]
    group_emd = float(np.mean([histogram_distance(pos[g], pos[h]) for g, h in pairs]))
    baseline = float(np.mean([histogram_distance(pos[g], rng.random(pos[g].shape))
                              for g in range(len(pos))]))
    report = {"command": "diagnose", "epochs": [e for e, _ in found], "missing": missing,
              "warnings": warnings, "final_pd": series[-1][1], "final_md": series[-1][2],
              "md_above_pd": bool(series[-1][2] > series[-1][1]),
              "group_histogram_distance": group_emd, "uniform_histogram_distance": baseline,
              "series": str(out / "pd_md.csv")}
    write_json(Path(args.out) / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="grouplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="scene seed (generate) or training seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--k", type=int, help="number of query groups (group-wise strategy)")
        p.add_argument("--multiplicity", type=int, help="positives per object (one-to-many)")
        return p

    common(sub.add_parser("generate", help="write train/val scene files"))
    common(sub.add_parser("train", help="train one model"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--no-nms", action="store_true", help="score raw detections")
    p.add_argument("--group-index", type=int, help="query group to decode (default 0)")
    common(sub.add_parser("sweep", help="train over K / multiplicity values and seeds"))
    p = common(sub.add_parser("diagnose", help="PD/MD series from saved checkpoints"))
    p.add_argument("--checkpoint-dir")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "diagnose": cmd_diagnose}


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config)
        report = COMMANDS[args.command](args, cfg)
    except LabError as exc:
        return _fail(exc.kind, str(exc))
    except TrainingDiverged as exc:
        return _fail("TrainingDiverged", str(exc))
    except (ValueError, OSError, FloatingPointError) as exc:
        return _fail("RuntimeError", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"status": "ok", "command": args.command, "out": args.out}))
    return 0 if report is not None else 1


def _fail(kind, message):
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


if __name__ == "__main__":
    sys.exit(main())
