"""Command-line entry point: ``rcagraph <subcommand>``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import SWEEP_PARAMS, RunConfig, parse_value
from .dataset import validate_dataset
from .dyngraph import EdgeNormalizer, build_snapshot, write_snapshot_csv
from .errors import ConfigError, DatasetError, RCAError
from .pipeline import (
    Checkpoint,
    assign_split,
    evaluate_cases,
    held_out_cases,
    prepare_all,
    prepare_case,
    run_ablation_suite,
    train,
    train_and_evaluate,
    write_training_log,
)
from .simgen import emit_dataset, load_scenario


class UsageError(ConfigError):
    pass


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "ablation", None):
        cfg = cfg.set("train.ablation", args.ablation)
    return cfg


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset(path):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return validate_dataset(path)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def cmd_simulate(args):
    cfg = _resolve(args)
    scenario = load_scenario(args.scenario) if args.scenario else cfg.scenario
    if args.seed is not None:
        scenario.seed = args.seed
    cfg = RunConfig(cfg.model, cfg.crd, cfg.train, cfg.data, scenario)
    out = emit_dataset(scenario, args.out)
    cfg.save(out / "resolved_config.json")
    print(f"wrote {len(list((out / 'cases').iterdir()))} cases to {out}")


def cmd_validate(args):
    ds = _dataset(args.data)
    types = {}
    for c in ds.cases:
        types[c.fault_type] = types.get(c.fault_type, 0) + 1
    print(f"{args.data}: {len(ds.services)} services, {len(ds.cases)} cases, interval {ds.interval}s")
    for t, n in sorted(types.items()):
        print(f"  {t}: {n}")


def cmd_train(args):
    cfg = _resolve(args)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    ds = assign_split(ds, cfg.train.train_fraction, cfg.train.seed)
    result = train(ds, cfg.model, cfg.crd, cfg.train, cfg.data)
    result.checkpoint.save(out / "checkpoint.json")
    write_training_log(result.log_rows, out / "training_log.csv")
    _write_json(out / "split.json", result.checkpoint.split)
    cfg.save(out / "resolved_config.json")
    print(f"best epoch {result.checkpoint.best_epoch}; checkpoint at {out / 'checkpoint.json'}")


def cmd_evaluate(args):
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _dataset(args.data)
    cases = list(ds.cases) if args.cases == "all" else held_out_cases(ckpt, ds)
    if not cases:
        raise UsageError("no cases to evaluate (checkpoint test ids not found in the dataset)")
    report = evaluate_cases(ckpt, ds, cases)
    out = _out_dir(args.out) if args.out else Path(args.checkpoint).parent
    _write_json(out / "eval_report.json", report.to_json())
    print(report.render())


def cmd_ablate(args):
    cfg = _resolve(args)
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    table = run_ablation_suite(ds, cfg.model, cfg.crd, cfg.train, cfg.data)
    (out / "ablation_table.md").write_text(table.to_markdown(), encoding="utf-8")
    _write_json(out / "ablation.json", table.to_json())
    cfg.save(out / "resolved_config.json")
    print(table.to_markdown(), end="")


def cmd_sweep(args):
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep parameter {args.param!r}; choose from {sorted(SWEEP_PARAMS)}")
    cfg = _resolve(args)
    values = [parse_value(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    runs = [cfg.set(args.param, v) for v in values]   # validate every point before training
    ds = _dataset(args.data)
    out = _out_dir(args.out)
    ds = assign_split(ds, cfg.train.train_fraction, cfg.train.seed)
    prepared = prepare_all(ds, cfg.data)
    rows = []
    for v, run in zip(values, runs):
        _, rep = train_and_evaluate(ds, run.model, run.crd, run.train, run.data, prepared)
        s = rep.summary()
        rows.append([args.param, v, s["AC@1"], s["AC@3"], s["AC@5"], s["Avg@5"], s["MRR"]])
        print(f"{args.param}={v}: AC@1 {s['AC@1']:.3f} Avg@5 {s['Avg@5']:.3f}")
    with open(out / "sweep_report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["param", "value", "AC@1", "AC@3", "AC@5", "Avg@5", "MRR"])
        w.writerows(rows)
    cfg.save(out / "resolved_config.json")


def cmd_dump_graph(args):
    ds = _dataset(args.data)
    try:
        case = ds.case(args.case)
    except KeyError:
        raise UsageError(f"unknown case {args.case!r}") from None
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        data_cfg, feat = ckpt.data_config, ckpt.featurizer
        prep = prepare_case(case, ds, data_cfg, feat.metric_names)
        normalizer, alpha = feat.edge_normalizer, feat.alpha
    else:
        cfg = _resolve(args)
        prep = prepare_all(ds, cfg.data, [case])[case.case_id]
        normalizer = EdgeNormalizer.fit([prep.normal_edges, prep.fault_edges])
        alpha = cfg.data.alpha
    win, edges = (prep.fault, prep.fault_edges) if args.window == "fault" else (prep.normal, prep.normal_edges)
    snap = build_snapshot(None, win.grid, normalizer, alpha, ds.services, edges=edges)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            write_snapshot_csv(snap, f)
    else:
        write_snapshot_csv(snap, sys.stdout)


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every random component")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rcagraph", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--scenario", help="scenario JSON file (defaults to the config's scenario section)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=["full", "no_tcd", "no_sco", "vanilla_gat", "static_graph"])
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank services for held-out cases and report metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for eval_report.json (default: next to the checkpoint)")
    p.add_argument("--cases", choices=["test", "all"], default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate every ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="retrain across values of one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--values", required=True, help="comma-separated values")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-graph", help="write one case's call-graph snapshot as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--window", choices=["fault", "normal"], default="fault")
    p.add_argument("--checkpoint", help="use the checkpoint's edge normalizer and alpha")
    p.add_argument("--out", help="CSV path (default: stdout)")
    _add_common(p)
    p.set_defaults(func=cmd_dump_graph)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DatasetError as e:
        print(f"dataset error:\n{e}", file=sys.stderr)
        return 1
    except (RCAError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
