"""Command-line entry point: ingest, prepare, gen, train, evaluate, predict."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from pathlib import Path

from .config import ABLATIONS, ConfigError, ModelConfig, load_config
from .evaluation import (ModelRanker, cold_start_report, evaluate, format_table, metric_rows,
                         parse_protocol, rank_items, write_metrics_csv)
from .graph import (FORMATS, InteractionLog, build_graph, chronological_split, ingest,
                    k_core_filter, last_per_user, leave_last_out_split, read_canonical, write_canonical, write_remap)
from .rng import Rng
from .synthetic import KINDS, GeneratorSpec, generate
from .training import CheckpointError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ptgcn")

# flag name -> config key, for flags that override model settings
MODEL_FLAGS = {"seed": "seed", "epochs": "max_epochs", "ablate": "ablate", "workers": "workers",
               "d": "d", "depth": "depth", "widths": "widths", "agg_layers": "agg_layers",
               "heads": "heads", "dropout": "dropout", "lr": "lr", "lam": "lam",
               "batch_size": "batch_size", "patience": "patience",
               "time_unit_seconds": "time_unit_seconds", "time_buckets": "time_buckets"}


def _ints(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _read_logs(paths) -> InteractionLog:
    logs = [read_canonical(p) for p in paths]
    first = logs[0]
    if any((lg.user_count, lg.item_count) != (first.user_count, first.item_count) for lg in logs):
        raise ValueError("input files disagree on the id universe")
    return InteractionLog([r for lg in logs for r in lg.records], first.user_count, first.item_count)


def _summary(name: str, lg: InteractionLog) -> str:
    users = len({r.user_id for r in lg.records})
    items = len({r.item_id for r in lg.records})
    return f"{name}: {len(lg.records)} interactions, {users} users, {items} items"


# ------------------------------------------------------------------ commands

def cmd_ingest(args) -> int:
    lg = ingest(args.input, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_canonical(lg, out / "interactions.tsv", [f"source={Path(args.input).name} format={args.format}"])
    write_remap(lg, out)
    print(_summary("ingested", lg))
    return 0


def cmd_prepare(args) -> int:
    lg = read_canonical(args.input)
    if args.core:
        lg = k_core_filter(lg, args.core, args.core)
        print(_summary(f"{args.core}-core", lg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split == "chrono":
        train_log, valid_log, test_log = chronological_split(lg, args.train_frac, args.valid_frac)
        parts = {"train": train_log, "valid": valid_log, "test": test_log}
    else:
        parts = _leave_last(lg, args.valid)
    write_canonical(lg, out / "all.tsv")
    for name, part in parts.items():
        write_canonical(part, out / f"{name}.tsv")
        print(_summary(name, part))
    return 0


def _leave_last(lg: InteractionLog, with_valid: bool) -> dict[str, InteractionLog]:
    train_log, test = leave_last_out_split(lg)
    parts = {}
    if with_valid:
        per_user = Counter(r.user_id for r in train_log.records)
        valid = [r for r in last_per_user(train_log.records) if per_user[r.user_id] >= 2]
        held = {id(r) for r in valid}
        train_log = train_log.subset(r for r in train_log.records if id(r) not in held)
        parts["valid"] = lg.subset(valid)
    parts["train"] = train_log
    parts["test"] = lg.subset(test)
    return parts


def cmd_gen(args) -> int:
    spec = GeneratorSpec(kind=args.kind, n_users=args.users, n_items=args.items, per_user=args.per_user,
                         seed=args.seed, noise=args.noise, epochs=args.epochs, windows=args.windows,
                         communities=args.communities, focus=args.focus, step_seconds=args.step_seconds)
    lg = generate(spec)
    write_canonical(lg, args.out, [f"generator {spec.describe()}"])
    print(_summary(f"generated {args.kind}", lg))
    return 0


def _model_config(args) -> tuple[ModelConfig, dict]:
    cfg, run = (load_config(args.config) if getattr(args, "config", None) else (ModelConfig(), {}))
    changes = {}
    for flag, key in MODEL_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            changes[key] = val
    return cfg.updated(changes), run


def _pick(args, run: dict, name: str, default=None):
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in run:
        return run[name]
    return default


def cmd_train(args) -> int:
    cfg, run = _model_config(args)
    train_path = _pick(args, run, "train")
    ckpt = _pick(args, run, "checkpoint")
    if not train_path or not ckpt:
        raise ConfigError("train needs --train and --checkpoint (flags or config file)")
    train_log = read_canonical(train_path)
    valid_path = _pick(args, run, "valid")
    valid = last_per_user(read_canonical(valid_path).records) if valid_path else None
    res = train(cfg, train_log, valid)
    save_checkpoint(res.params, res.adam, ckpt, {"best_epoch": res.best_epoch, "epochs_run": len(res.history)})
    hist_path = args.history or str(Path(ckpt).with_suffix(".history.csv"))
    cols = ["epoch", "loss", "objective", "valid_recall@10", "valid_ndcg@10"]
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in res.history:
            w.writerow([row["epoch"]] + [repr(row[c]) if c in row else "" for c in cols[1:]])
    print(f"trained {len(res.history)} epochs (best {res.best_epoch}); checkpoint {ckpt}; history {hist_path}")
    return 0


def _load_model(args, run):
    ckpt = _pick(args, run, "checkpoint")
    if not ckpt:
        raise ConfigError("--checkpoint is required")
    params, _, _ = load_checkpoint(ckpt)
    hist = _pick(args, run, "train")
    if not hist:
        raise ConfigError("--train (history files for the graph) is required")
    hist = hist if isinstance(hist, list) else [hist]
    lg = _read_logs(hist)
    if (lg.user_count, lg.item_count) != (params.n_users, params.n_items):
        raise ValueError("history universe does not match the checkpoint")
    return params, build_graph(lg)


def cmd_evaluate(args) -> int:
    _, run = (load_config(args.config) if args.config else (None, {}))
    params, g = _load_model(args, run)
    test_path = _pick(args, run, "test")
    if not test_path:
        raise ConfigError("--test is required")
    test = read_canonical(test_path).records
    ks = args.k or _ints(run.get("k", "5,10"))
    cohorts = args.cohorts or (_ints(run["cohorts"]) if "cohorts" in run else [])
    protocol = _pick(args, run, "protocol", "full")
    parse_protocol(protocol)
    seed = args.seed if args.seed is not None else params.config.seed
    ranker = ModelRanker(params)
    exclude = not args.include_seen
    metrics = evaluate(ranker, g, test, ks, protocol, Rng(seed).fork("sampled-eval"), exclude)
    rows = metric_rows(metrics)
    for k in ks if cohorts else ():
        for grp in cold_start_report(ranker, g, test, cohorts, k, protocol,
                                     Rng(seed).fork("sampled-eval"), exclude):
            for metric in ("recall", "ndcg"):
                rows.append((metric, k, grp["group"], grp[(metric, k)], grp["count"]))
    out = _pick(args, run, "out")
    if out:
        write_metrics_csv(out, rows)
    print(format_table(rows))
    return 0


def cmd_predict(args) -> int:
    _, run = (load_config(args.config) if args.config else (None, {}))
    params, g = _load_model(args, run)
    if not 0 <= args.user < params.n_users:
        raise ValueError(f"unknown user {args.user}")
    ranked = rank_items(ModelRanker(params), g, args.user, args.time, exclude_seen=not args.include_seen)
    for i, (v, s) in enumerate(zip(ranked.item_ids[:args.k], ranked.scores[:args.k]), 1):
        print(f"{i}\t{v}\t{s:.6f}")
    return 0


# -------------------------------------------------------------------- parser

def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="maximum epochs (0 writes the initial model)")
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--workers", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", type=_ints, help="per-layer neighborhood sizes, deepest first")
    p.add_argument("--agg-layers", dest="agg_layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--time-unit-seconds", dest="time_unit_seconds", type=float)
    p.add_argument("--time-buckets", dest="time_buckets", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptgcn", description="Time-aware graph convolution recommender.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalise a raw log to canonical TSV plus id remap tables")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("prepare", help="k-core filter and split a canonical TSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--core", type=int, default=0, help="minimum interactions per user and item")
    p.add_argument("--split", choices=("leave-last", "chrono"), default="leave-last")
    p.add_argument("--valid", action="store_true", help="leave-last: also hold out each user's second-last")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=30)
    p.add_argument("--per-user", dest="per_user", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=2, help="temporal_drift: number of alternating hot blocks")
    p.add_argument("--windows", type=int, default=40)
    p.add_argument("--communities", type=int, default=2)
    p.add_argument("--focus", type=int, default=4)
    p.add_argument("--step-seconds", dest="step_seconds", type=int, default=86400)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus history CSV")
    p.add_argument("--train")
    p.add_argument("--valid")
    p.add_argument("--checkpoint")
    p.add_argument("--history", help="history CSV path (default: next to the checkpoint)")
    _model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="ranking metrics and cold-start cohorts")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--train", nargs="+", help="interactions forming the graph (train, valid, ...)")
    p.add_argument("--test")
    p.add_argument("--k", type=_ints)
    p.add_argument("--cohorts", type=_ints, help="history-length thresholds, e.g. 20,30,40,50")
    p.add_argument("--protocol", help="full or sampled:M")
    p.add_argument("--include-seen", action="store_true", help="do not exclude previously seen items")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="top-k items for one user at one time")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--train", nargs="+")
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--time", type=float, required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--include-seen", action="store_true")
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
