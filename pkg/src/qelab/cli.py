"""Command-line experiment driver.

Subcommands: ``generate`` (synthetic corpus), ``prepare`` (derive scores
and labels for raw annotations), ``train``, ``evaluate``, ``compare``
(aggregator sweep producing a CSV). Every command is deterministic given
its config; the seed always comes from the config or flags, never the
clock.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    SchemaError,
    SyntheticSpec,
    TooFewInstances,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    ScoreNorm,
    config_from_dict,
    evaluate_split,
    run_experiment,
    save_run,
)
from .model import Vocabulary, encode_instance, load_checkpoint

OUT_DIR_ENV = "QELAB_OUT_DIR"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def _default_out(name: str) -> Path:
    base = os.environ.get(OUT_DIR_ENV, ".")
    return Path(base) / name


def _apply_set(config: dict, assignments) -> dict:
    """Apply ``--set dotted.key=value`` overrides; values parse as JSON
    with a plain-string fallback."""
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return config


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc


def _score_histogram(scores) -> dict:
    buckets = (("0", 0, 0), ("1-2", 1, 2), ("3-5", 3, 5), ("6-10", 6, 10),
               ("11+", 11, None))
    out = {}
    for label, lo, hi in buckets:
        out[label] = sum(1 for s in scores if s >= lo and (hi is None or s <= hi))
    return out


def cmd_generate(args) -> int:
    spec_dict = _load_json(args.spec) if args.spec else {}
    _apply_set(spec_dict, args.set)
    if args.n is not None:
        spec_dict["n_instances"] = args.n
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if "seed" not in spec_dict:
        raise ConfigError("generate requires a seed (--seed or spec file)")
    if "n_instances" not in spec_dict:
        raise ConfigError("generate requires n_instances (--n or spec file)")
    if "src_len_range" in spec_dict:
        spec_dict["src_len_range"] = tuple(spec_dict["src_len_range"])
    if spec_dict.get("emotion_probs") is not None:
        spec_dict["emotion_probs"] = tuple(spec_dict["emotion_probs"])
    try:
        spec = SyntheticSpec(**spec_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc
    instances = generate_synthetic(spec)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out_path, instances)
    by_emotion = {}
    for inst in instances:
        by_emotion[inst.emotion] = by_emotion.get(inst.emotion, 0) + 1
    scores = [inst.qe_score for inst in instances]
    print(f"wrote {len(instances)} instances to {out_path}")
    print("emotions:", json.dumps(dict(sorted(by_emotion.items()))))
    print("score histogram:", json.dumps(_score_histogram(scores)))
    print(f"score mean {np.mean(scores):.3f}  max {max(scores):g}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    instances = load_dataset(args.input)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out_path, instances)
    print(f"derived scores and labels for {len(instances)} records -> {out_path}")
    return EXIT_OK


def _build_config(args) -> ExperimentConfig:
    raw = _load_json(args.config) if args.config else {}
    _apply_set(raw, args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.aggregator is not None:
        raw.setdefault("aggregator", {})["kind"] = args.aggregator
    if args.tasks is not None:
        raw["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    return config_from_dict(raw)


def _print_metrics_table(metrics: dict) -> None:
    rows = []
    if "sentence" in metrics:
        m = metrics["sentence"]
        fmt = lambda v: "undefined" if v is None else f"{v:.4f}"
        rows.append(("sentence", f"spearman {fmt(m['spearman'])}  pearson {fmt(m['pearson'])}"))
    for task in ("word", "emotion"):
        if task in metrics:
            m = metrics[task]
            rows.append((task, f"F1 {m['f1']:.4f}  P {m['precision']:.4f}  R {m['recall']:.4f}"))
    width = max(len(r[0]) for r in rows)
    for name, desc in rows:
        print(f"  {name:<{width}}  {desc}")


def cmd_train(args) -> int:
    cfg = _build_config(args)
    out_dir = Path(args.out) if args.out else _default_out("run")
    result = run_experiment(cfg)
    report = save_run(result, out_dir)
    print(f"trained {'+'.join(cfg.tasks)} with {cfg.aggregator.kind} aggregator "
          f"({report['config']['epochs']} epochs, seed {cfg.seed})")
    print(f"report: {out_dir / 'report.json'}")
    _print_metrics_table(report["test_metrics"])
    return EXIT_OK


CSV_COLUMNS = (
    "aggregator", "status", "spearman", "pearson",
    "word_f1", "word_precision", "word_recall",
    "emotion_f1", "emotion_precision", "emotion_recall",
    "mean_alpha_sentence", "mean_alpha_word", "mean_alpha_emotion",
    "fallback_count",
)


def _comparison_row(kind: str, report: dict) -> dict:
    row = {c: "" for c in CSV_COLUMNS}
    row["aggregator"] = kind
    row["status"] = "ok"
    tm = report["test_metrics"]
    if "sentence" in tm:
        for key in ("spearman", "pearson"):
            v = tm["sentence"][key]
            row[key] = "" if v is None else f"{v:.6f}"
    for task in ("word", "emotion"):
        if task in tm:
            row[f"{task}_f1"] = f"{tm[task]['f1']:.6f}"
            row[f"{task}_precision"] = f"{tm[task]['precision']:.6f}"
            row[f"{task}_recall"] = f"{tm[task]['recall']:.6f}"
    epochs = report["epochs"]
    for task in report["config"]["tasks"]:
        mean_alpha = sum(e["mean_alpha"][task] for e in epochs) / len(epochs)
        row[f"mean_alpha_{task}"] = f"{mean_alpha:.6f}"
    row["fallback_count"] = str(sum(e["fallback_count"] for e in epochs))
    return row


def cmd_compare(args) -> int:
    kinds = [k.strip() for k in args.aggregators.split(",") if k.strip()]
    if len(kinds) < 2:
        raise ConfigError("compare needs at least 2 aggregators")
    out_dir = Path(args.out) if args.out else _default_out("compare")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    failed = []
    for i, kind in enumerate(kinds):
        run_args = argparse.Namespace(**vars(args))
        run_args.aggregator = kind
        cfg = _build_config(run_args)
        run_dir = out_dir / f"{i:02d}_{kind}"
        try:
            report = save_run(run_experiment(cfg), run_dir)
            rows.append(_comparison_row(kind, report))
        except Exception as exc:  # partial results are still reported
            failed.append((kind, exc))
            row = {c: "" for c in CSV_COLUMNS}
            row["aggregator"] = kind
            row["status"] = f"failed: {exc}"
            rows.append(row)
    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"comparison of {len(kinds)} aggregators -> {csv_path}")
    for row in rows:
        print(f"  {row['aggregator']:<8} {row['status']}"
              + (f"  spearman {row['spearman']}" if row["spearman"] else ""))
    if failed:
        for kind, exc in failed:
            print(f"run failed for {kind}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt_dir = Path(args.checkpoint)
    bin_path = ckpt_dir / "checkpoint.bin" if ckpt_dir.is_dir() else ckpt_dir
    manifest_path = bin_path.with_suffix(".json")
    if not bin_path.exists() or not manifest_path.exists():
        raise ConfigError(f"checkpoint pair not found at {ckpt_dir}")
    params, manifest = load_checkpoint(bin_path, manifest_path)
    vocab = Vocabulary(tokens=tuple(manifest["vocab"]))
    norm = ScoreNorm(mean=manifest["score_norm"]["mean"], std=manifest["score_norm"]["std"])
    instances = load_dataset(args.data)
    if args.split != "all":
        split = split_dataset(instances, manifest["seed"] if args.seed is None else args.seed)
        instances = {"train": split.train, "validation": split.validation,
                     "test": split.test}[args.split]
    encoded = [encode_instance(i, vocab, params.config.max_len) for i in instances]
    metrics = evaluate_split(params, encoded, norm, args.batch_size)
    print(f"evaluated {len(encoded)} instances ({args.split})")
    _print_metrics_table(metrics)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"split": args.split, "n_instances": len(encoded),
                       "metrics": metrics}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"metrics: {out_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qelab",
        description="Multi-task QE training laboratory: synthesize corpora, "
                    "train with a chosen loss-combination heuristic, compare heuristics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic JSONL corpus")
    p.add_argument("--spec", help="JSON file with the synthetic spec")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a spec field (dotted path)")
    p.add_argument("--n", type=int, help="number of instances")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prepare", help="derive scores/labels for raw annotation records")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    for name in ("train", "compare"):
        p = sub.add_parser(name, help="train one run" if name == "train"
                           else "train once per aggregator and emit a CSV")
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")
        p.add_argument("--seed", type=int)
        p.add_argument("--tasks", help="comma-separated task subset")
        p.add_argument("--epochs", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV})")
        if name == "train":
            p.add_argument("--aggregator", help="aggregator kind")
            p.set_defaults(func=cmd_train)
        else:
            p.add_argument("--aggregators", required=True,
                           help="comma-separated aggregator kinds")
            p.set_defaults(func=cmd_compare, aggregator=None)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True,
                   help="run directory or checkpoint.bin path")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test", "all"),
                   default="all")
    p.add_argument("--seed", type=int, help="split seed (defaults to the checkpoint's)")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, TooFewInstances) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
