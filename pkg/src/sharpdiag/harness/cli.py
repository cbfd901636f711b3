"""sharpdiag command line.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from sharpdiag.diffcore import NumericalError, load_checkpoint, scores
from sharpdiag.harness import runner
from sharpdiag.harness.config import ExperimentConfig, load_config, save_config
from sharpdiag.landscape import NORMALIZATIONS, evaluate_grid, sample_directions
from sharpdiag.metrics import ScoreSet, compute_eer
from sharpdiag.sharpness import SharpnessConfig, dataset_sharpness
from sharpdiag.synthbench import generate_shifted_test, generate_train, read_dataset, write_dataset, ShiftSpec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    gen = generate_train(cfg.task)
    write_dataset(gen, os.path.join(args.out, "train.csv"), os.path.join(args.out, "train.json"))
    written = ["train"]
    for shift in (ShiftSpec("attack", 0),) + tuple(cfg.shifts):
        g = generate_shifted_test(cfg.task, shift)
        write_dataset(g, os.path.join(args.out, f"{shift.name}.csv"), os.path.join(args.out, f"{shift.name}.json"))
        written.append(shift.name)
    _print_json({"out": args.out, "datasets": written})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    changes = {}
    if args.optimizer:
        changes["optimizer"] = args.optimizer
    if args.rho is not None:
        changes["rho"] = args.rho
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if changes:
        cfg = cfg.with_(**changes)
    out = args.out or cfg.output_dir
    _, result = runner.train_run(cfg, args.seed, out, with_sharpness=not args.no_sharpness)
    _print_json(result.payload())
    return EXIT_OK


def _datasets(paths):
    return {os.path.splitext(os.path.basename(p))[0]: read_dataset(p, name=os.path.splitext(os.path.basename(p))[0])
            for p in paths}


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = {}
    for name, ds in _datasets(args.data).items():
        s = scores(model, ds)
        out[name] = compute_eer(ScoreSet.from_labels(s, ds.labels)).eer
        if args.scores_dir:
            os.makedirs(args.scores_dir, exist_ok=True)
            with open(os.path.join(args.scores_dir, f"{name}.csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["score", "label"])
                for sc, lab in zip(s, ds.labels):
                    w.writerow([repr(float(sc)), int(lab)])
    _print_json({"checkpoint": args.checkpoint, "eer": out})
    return EXIT_OK


def cmd_eer(args) -> int:
    with open(args.scores, newline="") as fh:
        rows = list(csv.DictReader(fh))
    s = np.array([float(r["score"]) for r in rows])
    y = np.array([int(r["label"]) for r in rows])
    res = compute_eer(ScoreSet.from_labels(s, y))
    _print_json({"eer": res.eer, "threshold": res.threshold, "n_bona": res.n_bona, "n_spoof": res.n_spoof})
    return EXIT_OK


def cmd_sharpness(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data, name=os.path.splitext(os.path.basename(args.data))[0])
    cfg = SharpnessConfig(rho=args.rho, batch_size=args.batch_size, ascent_steps=args.ascent_steps,
                          restarts=args.restarts, seed=args.seed)
    report = dataset_sharpness(model, ds, cfg, model_id=os.path.basename(os.path.dirname(os.path.abspath(args.checkpoint))))
    if args.out:
        runner.atomic_write_text(args.out, report.to_json() + "\n")
    if args.csv:
        runner.atomic_write_text(args.csv, report.to_csv())
    _print_json({"mean": report.mean, "std": report.std, "n_batches": len(report.per_batch)})
    return EXIT_OK


def cmd_landscape(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data, name=os.path.splitext(os.path.basename(args.data))[0])
    dirs = sample_directions(model, args.seed, args.normalization)
    grid = evaluate_grid(model, ds, dirs, args.half_range, args.resolution)
    grid.write_csv(args.out_prefix + ".csv")
    grid.write_json(args.out_prefix + ".json")
    _print_json({"origin_loss": grid.origin_loss, "spread": grid.spread, "overflow": grid.overflow,
                 "zeroed_blocks": dirs.zeroed_blocks})
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.output_dir
    table, _ = runner.benchmark(cfg, out)
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def cmd_rho_sweep(args) -> int:
    cfg = _config(args)
    rhos = [float(r) for r in args.rhos.split(",")]
    out = args.out or cfg.output_dir
    results = runner.rho_sweep(cfg, rhos, out, include_adam=not args.no_adam)
    _print_json({"out": out, "runs": [r.run_id for r in results]})
    return EXIT_OK


def cmd_correlate(args) -> int:
    sets = args.test_set or None
    reports = runner.correlate(args.results, sets, args.out)
    _print_json([{k: v for k, v in r.to_dict().items() if k != "scatter"} for r in reports])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sharpdiag", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        return sp

    sp = with_config(sub.add_parser("gen-data", help="write synthetic train/test CSVs"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = with_config(sub.add_parser("train", help="train one system"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--optimizer", choices=("adam", "sam"))
    sp.add_argument("--rho", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out")
    sp.add_argument("--no-sharpness", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="EER of a checkpoint on dataset CSVs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--scores-dir", help="also export per-set score,label CSVs")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("eer", help="EER from a score,label CSV")
    sp.add_argument("--scores", required=True)
    sp.set_defaults(func=cmd_eer)

    sp = sub.add_parser("sharpness", help="m-sharpness of a checkpoint on a dataset CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--rho", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--ascent-steps", type=int, default=20)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", help="report JSON")
    sp.add_argument("--csv", help="one-row summary CSV")
    sp.set_defaults(func=cmd_sharpness)

    sp = sub.add_parser("landscape", help="2-D loss grid around a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--half-range", type=float, default=1.0)
    sp.add_argument("--resolution", type=int, default=41)
    sp.add_argument("--normalization", choices=NORMALIZATIONS, default="filter")
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_landscape)

    sp = with_config(sub.add_parser("benchmark", help="Adam vs SAM over seeds, tables and mismatch curves"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_benchmark)

    sp = with_config(sub.add_parser("rho-sweep", help="SAM over a list of rho values (plus Adam)"))
    sp.add_argument("--rhos", default="0.05,0.01,0.005,0.001")
    sp.add_argument("--no-adam", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rho_sweep)

    sp = sub.add_parser("correlate", help="sharpness vs EER correlation from a results directory")
    sp.add_argument("--results", required=True)
    sp.add_argument("--test-set", action="append")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_correlate)

    sp = sub.add_parser("init-config", help="write the default config JSON")
    sp.add_argument("path")
    sp.set_defaults(func=lambda a: save_config(ExperimentConfig(), a.path) or EXIT_OK)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"sharpdiag: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, FileNotFoundError, UsageError) as exc:
        print(f"sharpdiag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
