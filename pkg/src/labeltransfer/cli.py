"""Command-line interface: generate, train, evaluate, ablate, inspect, rerun.

Every command writes a run manifest recording the resolved configuration,
seed, artifact paths, tool version, and wall-clock duration. `rerun` replays
a manifest into a fresh output directory and reproduces the artifacts.

Exit codes: 0 success, 1 runtime/IO failure, 2 usage error.
Config precedence: command-line flags > --config file (flat JSON) > defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np

from . import cooccur, data, features
from . import autodiff as ad
from .metrics import evaluate
from .training import (ABLATION_MODES, MODES, TrainConfig, TrainingError,
                       evaluate_state, load_checkpoint, predict,
                       save_checkpoint, train, write_history_csv)

MANIFEST_NAME = "manifest.json"
FIXED_THRESHOLD_GRID = [round(0.1 * k, 1) for k in range(1, 10)]
PROTOTYPE_GRID = [1, 5, 10, 20]


class UsageError(Exception):
    """Invalid arguments or configuration values; exit code 2."""


def tool_version():
    try:
        return metadata.version("labeltransfer")
    except metadata.PackageNotFoundError:
        return "unknown"


# ----------------------------------------------------------------- manifests

def write_manifest(out_dir, command, argv, config, seed, artifacts, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "tool_version": tool_version(),
        "duration_seconds": time.monotonic() - started,
    }
    path = Path(out_dir) / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


# -------------------------------------------------------- config resolution

def load_config_file(path):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must be a flat JSON object")
    return raw


def resolve_train_config(args):
    """Merge defaults < config file < explicitly set flags into TrainConfig."""
    field_names = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    if getattr(args, "config", None):
        for key, val in load_config_file(args.config).items():
            if key not in field_names:
                raise UsageError(f"unknown config key: {key}")
            values[key] = val
    for name in field_names:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "pair_hidden" in values:
        values["pair_hidden"] = tuple(int(v) for v in values["pair_hidden"])
    try:
        config = TrainConfig(**values)
        config.validate()
    except (TypeError, ValueError, TrainingError) as exc:
        raise UsageError(str(exc)) from exc
    return config


def add_train_config_flags(parser):
    group = parser.add_argument_group(
        "training configuration (overrides --config file, then defaults)")
    group.add_argument("--config", help="flat JSON file of TrainConfig fields")
    group.add_argument("--epochs", type=int)
    group.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--learning-rate", dest="learning_rate", type=float)
    group.add_argument("--weight-decay", dest="weight_decay", type=float)
    group.add_argument("--lambda-cooccur", dest="lambda_cooccur", type=float)
    group.add_argument("--lambda-ranking", dest="lambda_ranking", type=float)
    group.add_argument("--lambda-threshold", dest="lambda_threshold",
                       type=float)
    group.add_argument("--num-prototypes", dest="num_prototypes", type=int)
    group.add_argument("--feature-dim", dest="feature_dim", type=int)
    group.add_argument("--pair-hidden", dest="pair_hidden",
                       type=lambda s: tuple(int(v) for v in s.split(",")))
    group.add_argument("--dtl-beta", dest="dtl_beta", type=float)
    group.add_argument("--theta-init", dest="theta_init", type=float)
    group.add_argument("--threshold-lr", dest="threshold_lr", type=float)
    group.add_argument("--learn-thresholds", dest="learn_thresholds",
                       type=parse_bool)
    group.add_argument("--aux-updates-features", dest="aux_updates_features",
                       type=parse_bool)
    group.add_argument("--mode", choices=ABLATION_MODES)
    group.add_argument("--seed", type=int)


def parse_bool(text):
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def parse_float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


# ------------------------------------------------------------------ generate

def cmd_generate(args, argv):
    started = time.monotonic()
    try:
        config = data.benchmark_config(
            num_categories=args.categories, num_samples=args.samples,
            regions_per_sample=args.regions, feature_dim=args.dim,
            pair_strength=args.affinity, noise_sigma=args.noise,
            base_logit=args.base_logit, center_scale=args.center_scale,
            center_seed=args.center_seed, seed=args.seed)
        config.validate()
    except (ValueError, data.DatasetError) as exc:
        raise UsageError(str(exc)) from exc
    dataset = data.generate(config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.save(dataset, out)
    snapshot = {
        "categories": args.categories, "samples": args.samples,
        "regions": args.regions, "dim": args.dim, "affinity": args.affinity,
        "noise": args.noise, "base_logit": args.base_logit,
        "center_scale": args.center_scale, "center_seed": args.center_seed,
        "seed": args.seed,
    }
    write_manifest(out.parent, "generate", argv, snapshot, args.seed,
                   {"dataset": out.name}, started)
    print(f"wrote {out} ({len(dataset)} samples, "
          f"{dataset.num_categories} categories)")
    return 0


# --------------------------------------------------------------------- train

def prepare_splits(dataset, known, test_fraction, seed):
    """Held-out split and label dropping used by train/evaluate/ablate.

    Split and mask seeds are fixed offsets of the run seed so `evaluate`
    can rebuild the identical held-out set from the manifest alone.
    """
    train_full, test_set = data.train_test_split(dataset, test_fraction,
                                                 seed=seed + 1000)
    train_set = data.drop_labels(train_full, known, seed=seed + 2000)
    return train_full, train_set, test_set


def run_training(dataset, config, known, test_fraction, out_dir=None):
    train_full, train_set, test_set = prepare_splits(
        dataset, known, test_fraction, config.seed)
    log_path = None if out_dir is None else Path(out_dir) / "history.csv"
    state, history = train(train_set, config,
                           full_labels=train_full.label_matrix(),
                           log_path=log_path, eval_data=test_set)
    report = evaluate_state(state, test_set)
    return state, history, report, test_set


def cmd_train(args, argv):
    started = time.monotonic()
    config = resolve_train_config(args)
    if not 0.0 < args.known <= 1.0:
        raise UsageError(f"--known must be in (0, 1], got {args.known}")
    if not 0.0 < args.test_fraction < 1.0:
        raise UsageError("--test-fraction must be in (0, 1), "
                         f"got {args.test_fraction}")
    data_path = Path(args.data)
    if not data_path.is_file():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    dataset = data.load(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    state, history, report, _ = run_training(
        dataset, config, args.known, args.test_fraction, out_dir=out)
    save_checkpoint(state, config, out / "checkpoint.npz")
    report.save_csv(out / "eval.csv")
    (out / "eval.md").write_text(report.to_markdown() + "\n",
                                 encoding="utf-8")

    snapshot = dataclasses.asdict(config)
    snapshot.update({"known": args.known, "test_fraction": args.test_fraction,
                     "data": str(data_path)})
    write_manifest(out, "train", argv, snapshot, config.seed,
                   {"checkpoint": "checkpoint.npz", "history": "history.csv",
                    "eval_csv": "eval.csv", "eval_md": "eval.md"}, started)
    print(f"final test mAP {report.map_score:.4f} "
          f"(OF1 {report.of1:.4f}, CF1 {report.cf1:.4f}); artifacts in {out}")
    return 0


# ------------------------------------------------------------------ evaluate

def cmd_evaluate(args, argv):
    started = time.monotonic()
    manifest = read_manifest(args.run)
    if manifest.get("command") != "train":
        raise UsageError(f"{args.run} does not contain a training manifest")
    run_dir = Path(args.run)
    if run_dir.is_file():
        run_dir = run_dir.parent
    checkpoint_path = run_dir / manifest["artifacts"]["checkpoint"]
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    state, config = load_checkpoint(checkpoint_path)

    data_path = Path(args.data) if args.data else Path(manifest["config"]["data"])
    if not data_path.is_file():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    dataset = data.load(data_path)
    embeddings = state.sarl.category_embeddings
    if dataset.num_categories != embeddings.shape[0]:
        raise TrainingError(
            f"checkpoint was trained with {embeddings.shape[0]} categories "
            f"but dataset has {dataset.num_categories}")
    if dataset.feature_dim != embeddings.shape[1]:
        raise TrainingError(
            f"checkpoint region dim {embeddings.shape[1]} does not match "
            f"dataset region dim {dataset.feature_dim}")

    _, _, test_set = prepare_splits(
        dataset, manifest["config"]["known"],
        manifest["config"]["test_fraction"], config.seed)
    report = evaluate_state(state, test_set)

    out = Path(args.out) if args.out else run_dir / "eval_rerun"
    out.mkdir(parents=True, exist_ok=True)
    report.save_csv(out / "eval.csv")
    (out / "eval.md").write_text(report.to_markdown() + "\n",
                                 encoding="utf-8")
    write_manifest(out, "evaluate", argv,
                   {"run": str(args.run), "data": str(data_path)},
                   config.seed, {"eval_csv": "eval.csv", "eval_md": "eval.md"},
                   started)
    print(f"mAP {report.map_score:.9f} OF1 {report.of1:.4f} "
          f"CF1 {report.cf1:.4f}")
    return 0


# -------------------------------------------------------------------- ablate

def ablate_cells(grid, knowns, seeds, base_seed):
    """Yield (row_label, known, seed, config overrides) for every grid cell."""
    if grid == "modes":
        rows = [(mode, {"mode": mode}) for mode in MODES]
    elif grid == "thresholds":
        rows = [(f"fixed-{theta}", {"theta_init": theta,
                                    "learn_thresholds": False})
                for theta in FIXED_THRESHOLD_GRID]
        rows.append(("dtl", {"learn_thresholds": True}))
    elif grid == "prototypes":
        rows = [(f"K={k}", {"num_prototypes": k}) for k in PROTOTYPE_GRID]
    else:
        raise UsageError(f"unknown grid: {grid}")
    for label, overrides in rows:
        for known in knowns:
            for offset in range(seeds):
                yield label, known, base_seed + offset, overrides


def cmd_ablate(args, argv):
    started = time.monotonic()
    base_config = resolve_train_config(args)
    knowns = args.known
    if not knowns or any(not 0.0 < k <= 1.0 for k in knowns):
        raise UsageError(f"--known proportions must be in (0, 1]: {knowns}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    data_path = Path(args.data)
    if not data_path.is_file():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    dataset = data.load(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cell_rows = []  # one record per (row, known, seed)
    failures = 0
    for label, known, seed, overrides in ablate_cells(
            args.grid, knowns, args.seeds, base_config.seed):
        config = dataclasses.replace(base_config, seed=seed, **overrides)
        try:
            _, _, report, _ = run_training(dataset, config, known,
                                           args.test_fraction)
            cell_rows.append({"row": label, "known": known, "seed": seed,
                              "map": report.map_score, "of1": report.of1,
                              "cf1": report.cf1, "status": "ok"})
        except (TrainingError, ValueError, FloatingPointError) as exc:
            failures += 1
            cell_rows.append({"row": label, "known": known, "seed": seed,
                              "map": None, "of1": None, "cf1": None,
                              "status": f"failed: {exc}"})
        print(f"{label} known={known} seed={seed}: "
              f"{cell_rows[-1]['status']} "
              f"mAP={cell_rows[-1]['map']}", flush=True)

    row_labels = list(dict.fromkeys(r["row"] for r in cell_rows))
    medians = {}
    for label in row_labels:
        for known in knowns:
            vals = [r["map"] for r in cell_rows
                    if r["row"] == label and r["known"] == known
                    and r["map"] is not None]
            medians[label, known] = float(np.median(vals)) if vals else None

    import csv as csv_mod
    with open(out / "cells.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["row", "known", "seed", "map", "of1", "cf1",
                         "status"])
        for r in cell_rows:
            writer.writerow([r["row"], r["known"], r["seed"],
                             "" if r["map"] is None else repr(r["map"]),
                             "" if r["of1"] is None else repr(r["of1"]),
                             "" if r["cf1"] is None else repr(r["cf1"]),
                             r["status"]])
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["row"] + [str(k) for k in knowns])
        for label in row_labels:
            writer.writerow([label] + [
                "FAIL" if medians[label, k] is None
                else repr(medians[label, k]) for k in knowns])
    lines = ["| setting | " + " | ".join(f"{k:.0%} known" for k in knowns)
             + " |",
             "| --- |" + " --- |" * len(knowns)]
    for label in row_labels:
        cells = ["FAIL" if medians[label, k] is None
                 else f"{medians[label, k]:.4f}" for k in knowns]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    (out / "grid.md").write_text(
        f"Median test mAP over {args.seeds} seed(s), grid `{args.grid}`\n\n"
        + "\n".join(lines) + "\n", encoding="utf-8")

    snapshot = dataclasses.asdict(base_config)
    snapshot.update({"grid": args.grid, "known": knowns, "seeds": args.seeds,
                     "test_fraction": args.test_fraction,
                     "data": str(data_path)})
    write_manifest(out, "ablate", argv, snapshot, base_config.seed,
                   {"cells": "cells.csv", "grid_csv": "grid.csv",
                    "grid_md": "grid.md"}, started)
    print(f"grid complete: {len(cell_rows) - failures}/{len(cell_rows)} "
          f"cells ok; reports in {out}")
    return 0


# ------------------------------------------------------------------- inspect

def cmd_inspect(args, argv):
    manifest = read_manifest(args.run)
    run_dir = Path(args.run)
    if run_dir.is_file():
        run_dir = run_dir.parent
    checkpoint_path = run_dir / manifest["artifacts"]["checkpoint"]
    if not checkpoint_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    state, config = load_checkpoint(checkpoint_path)
    data_path = Path(args.data) if args.data else Path(manifest["config"]["data"])
    dataset = data.load(data_path)
    if not 0 <= args.sample < len(dataset):
        raise UsageError(f"--sample must be in [0, {len(dataset)}), "
                         f"got {args.sample}")

    sample = dataset.samples[args.sample]
    regions = sample.regions[None]
    g = ad.Graph()
    sarl = features.sarl_leaves(g, state.sarl)
    feats = features.extract_category_features(g, g.leaf(regions), sarl)
    probs = features.classify(g, feats, sarl)
    pair = cooccur.pair_net_leaves(g, state.pair)
    cooc = cooccur.predict_cooccurrence(g, feats, pair)

    theta_intra, theta_cross = state.threshold_pair.effective()
    info = {
        "sample_id": sample.id,
        "labels": sample.labels.tolist(),
        "probabilities": probs.data[0].round(6).tolist(),
        "cooccurrence": cooc.data[0].round(6).tolist(),
        "intra_evidence": cooccur.intra_evidence(
            cooc.data, sample.labels[None])[0].round(6).tolist(),
        "thresholds": {"intra": theta_intra, "cross": theta_cross},
        "epoch": state.epoch,
    }
    if state.bank is not None:
        info["prototypes"] = {
            "shape": list(state.bank.prototypes.shape),
            "valid_categories": state.bank.valid.astype(int).tolist(),
            "member_counts": state.bank.counts.tolist(),
        }
    text = json.dumps(info, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


# --------------------------------------------------------------------- rerun

def cmd_rerun(args, argv):
    manifest = read_manifest(args.manifest)
    replay = list(manifest["argv"])
    if args.out:
        if "--out" not in replay:
            raise UsageError("original command had no --out to redirect")
        i = replay.index("--out")
        original = Path(replay[i + 1])
        if manifest["command"] == "generate":
            replay[i + 1] = str(Path(args.out) / original.name)
        else:
            replay[i + 1] = args.out
    return main(replay)


# ---------------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="labeltransfer",
        description="Multi-label training from partial labels with "
                    "co-occurrence and prototype pseudo-labeling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--categories", type=int, default=20)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--regions", type=int, default=8)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--affinity", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=2.4)
    p.add_argument("--base-logit", dest="base_logit", type=float,
                   default=-1.0)
    p.add_argument("--center-scale", dest="center_scale", type=float,
                   default=2.0)
    p.add_argument("--center-seed", dest="center_seed", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a partially labeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--known", type=float, default=0.1,
                   help="proportion of labels kept per sample")
    p.add_argument("--test-fraction", dest="test_fraction", type=float,
                   default=0.2)
    p.add_argument("--out", required=True)
    add_train_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a training run's "
                       "checkpoint on its held-out split")
    p.add_argument("--run", required=True,
                   help="training output directory (or its manifest)")
    p.add_argument("--data", help="override the dataset path")
    p.add_argument("--out", help="report directory (default RUN/eval_rerun)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a configuration grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True,
                   choices=("modes", "thresholds", "prototypes"))
    p.add_argument("--known", type=parse_float_list, default=[0.1],
                   help="comma-separated known-label proportions")
    p.add_argument("--seeds", type=int, default=1,
                   help="seeds per cell (base seed from --seed)")
    p.add_argument("--test-fraction", dest="test_fraction", type=float,
                   default=0.2)
    p.add_argument("--out", required=True)
    add_train_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump predictions, co-occurrence and "
                       "prototypes for one sample")
    p.add_argument("--run", required=True)
    p.add_argument("--data", help="override the dataset path")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("rerun", help="replay a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="redirect outputs to this directory")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TrainingError, data.DatasetError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
