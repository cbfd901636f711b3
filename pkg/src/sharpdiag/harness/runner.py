"""Training, evaluation and aggregation of Adam/SAM systems.

Everything a run writes lives under ``<output_dir>/<run_id>/``.  ``result.json``
is a pure function of (config, seed); wall-clock time goes to ``timing.json``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from sharpdiag.diffcore import (
    Dataset,
    MlpModel,
    NumericalError,
    dataset_loss,
    load_checkpoint,
    save_checkpoint,
    scores,
)
from sharpdiag.harness.config import ExperimentConfig
from sharpdiag.landscape import evaluate_grid, sample_directions
from sharpdiag.metrics import (
    ScoreSet,
    compute_eer,
    correlate_systems,
    write_correlation_json,
    write_correlation_table,
)
from sharpdiag.optim import AdamState, StepLog, cosine_lr, plain_step, sam_step
from sharpdiag.sharpness import dataset_sharpness
from sharpdiag.synthbench import ShiftSpec, generate_shifted_test, generate_train

RESULT_FIELDS = ("run_id", "system", "optimizer", "rho", "seed", "test_set", "eer", "sharpness")
CURVE_FIELDS = ("system", "optimizer", "axis", "level", "sharpness_mean", "sharpness_std", "n_seeds")


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


@dataclass
class RunResult:
    run_id: str
    config_hash: str
    seed: int
    system: str
    optimizer: str
    rho: float | None
    eer: dict
    sharpness: dict
    log_path: str = ""
    checkpoint_path: str = ""
    final_train_loss: float = math.nan
    wall_time: float = field(default=0.0, compare=False)

    def payload(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d

    @classmethod
    def from_payload(cls, d: dict) -> "RunResult":
        return cls(**d)


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.hash()}-s{seed}"


def build_test_sets(cfg: ExperimentConfig) -> dict:
    """Matched test set plus every configured shift, keyed by name."""
    sets = {"matched": generate_shifted_test(cfg.task, ShiftSpec("attack", 0)).dataset}
    for shift in cfg.shifts:
        sets[shift.name] = generate_shifted_test(cfg.task, shift).dataset
    return sets


def train_model(cfg: ExperimentConfig, seed: int, train_set: Dataset | None = None,
                log_path=None, force_zero_perturbation: bool = False) -> MlpModel:
    """Train one system; deterministic in (cfg, seed).

    Epoch ``e`` shuffles with seed ``[seed, e]``.
    """
    if train_set is None:
        train_set = generate_train(cfg.task).dataset
    model = MlpModel.init(cfg.layer_dims, cfg.activation, seed)
    adam = cfg.adam_config()
    sam = cfg.sam_config() if cfg.optimizer == "sam" else None
    state = AdamState.zeros_like(model.params)
    log = StepLog(log_path) if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            shuffle = int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
            for batch_id, batch in enumerate(train_set.batches(cfg.batch_size, shuffle_seed=shuffle)):
                where = f"step {step} (lr={cosine_lr(adam, step)!r}, epoch {epoch}, batch {batch_id})"
                try:
                    if sam is not None:
                        params, report = sam_step(model, batch, state, sam, step, cfg.class_weights,
                                                  force_zero_perturbation=force_zero_perturbation)
                    else:
                        params, report = plain_step(model, batch, state, adam, step, cfg.class_weights)
                except NumericalError as exc:
                    raise NumericalError(f"{exc} at {where}") from exc
                if not (math.isfinite(report.loss_w) and np.all(np.isfinite(params.values))):
                    raise NumericalError(f"non-finite loss/params at {where}")
                if log is not None:
                    log.write(report)
                model = model.with_params(params)
                step += 1
    finally:
        if log is not None:
            log.close()
    return model


def detection_eer(model: MlpModel, dataset: Dataset) -> float:
    s = scores(model, dataset)
    return compute_eer(ScoreSet.from_labels(s, dataset.labels)).eer


def evaluate_model(model: MlpModel, test_sets: dict) -> dict:
    return {name: detection_eer(model, ds) for name, ds in test_sets.items()}


def sharpness_by_set(model: MlpModel, test_sets: dict, cfg: ExperimentConfig) -> dict:
    return {name: dataset_sharpness(model, ds, cfg.sharpness, cfg.class_weights).mean
            for name, ds in test_sets.items()}


def train_run(cfg: ExperimentConfig, seed: int, out_root=None, test_sets: dict | None = None,
              train_set: Dataset | None = None, with_sharpness: bool = True) -> tuple[MlpModel, RunResult]:
    """Train, evaluate and (optionally) persist one run."""
    rid = run_id(cfg, seed)
    run_dir = os.path.join(out_root, rid) if out_root else None
    log_path = ckpt_path = ""
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        log_path = os.path.join(run_dir, "steps.csv")
        ckpt_path = os.path.join(run_dir, "model.ckpt")
    t0 = time.perf_counter()
    if train_set is None:
        train_set = generate_train(cfg.task).dataset
    model = train_model(cfg, seed, train_set, log_path or None)
    if test_sets is None:
        test_sets = build_test_sets(cfg)
    eer = evaluate_model(model, test_sets)
    sharp = sharpness_by_set(model, test_sets, cfg) if with_sharpness else {}
    result = RunResult(
        run_id=rid,
        config_hash=cfg.hash(),
        seed=seed,
        system=cfg.system,
        optimizer=cfg.optimizer,
        rho=cfg.rho if cfg.optimizer == "sam" else None,
        eer=eer,
        sharpness=sharp,
        log_path=os.path.relpath(log_path, out_root) if log_path else "",
        checkpoint_path=os.path.relpath(ckpt_path, out_root) if ckpt_path else "",
        final_train_loss=dataset_loss(model, train_set, cfg.class_weights),
        wall_time=time.perf_counter() - t0,
    )
    if run_dir:
        save_checkpoint(model, ckpt_path)
        atomic_write_json(os.path.join(run_dir, "result.json"), result.payload())
        atomic_write_json(os.path.join(run_dir, "timing.json"), {"wall_time_s": result.wall_time})
        atomic_write_json(os.path.join(run_dir, "config.json"), cfg.to_dict())
    return model, result


def load_results(results_dir) -> list:
    out = []
    for entry in sorted(os.listdir(results_dir)):
        path = os.path.join(results_dir, entry, "result.json")
        if os.path.isfile(path):
            with open(path) as fh:
                out.append(RunResult.from_payload(json.load(fh)))
    return out


def result_rows(results) -> list:
    rows = []
    for r in results:
        for test_set, eer in r.eer.items():
            rows.append({
                "run_id": r.run_id,
                "system": r.system,
                "optimizer": r.optimizer,
                "rho": "" if r.rho is None else repr(r.rho),
                "seed": r.seed,
                "test_set": test_set,
                "eer": repr(eer),
                "sharpness": repr(r.sharpness[test_set]) if test_set in r.sharpness else "",
            })
    return rows


def write_results_csv(results, path) -> None:
    atomic_write_text(path, _csv_text(RESULT_FIELDS, result_rows(results)))


def read_results_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class ResultsTable:
    """Mean/std EER per (system, optimizer, test set) with lower-value flags."""

    runs: list
    cells: dict  # (system, optimizer, test_set) -> {"mean", "std", "n"}
    test_sets: list

    @classmethod
    def from_results(cls, results) -> "ResultsTable":
        groups = defaultdict(list)
        test_sets = []
        for r in results:
            for name, eer in r.eer.items():
                groups[(r.system, r.optimizer, name)].append(eer)
                if name not in test_sets:
                    test_sets.append(name)
        cells = {k: dict(zip(("mean", "std"), _mean_std(v)), n=len(v)) for k, v in groups.items()}
        return cls(list(results), cells, test_sets)

    def bold(self, system: str, optimizer: str, test_set: str, stat: str = "mean") -> bool:
        """True when this optimizer has the lower value of ``stat`` for the system."""
        mine = self.cells.get((system, optimizer, test_set))
        if mine is None:
            return False
        others = [c[stat] for (s, o, t), c in self.cells.items()
                  if s == system and t == test_set and o != optimizer]
        return all(mine[stat] <= v for v in others)

    def to_csv(self) -> str:
        fields = ["system", "optimizer"] + self.test_sets
        rows = []
        for system, optimizer in sorted({(s, o) for s, o, _ in self.cells}):
            row = {"system": system, "optimizer": optimizer}
            for t in self.test_sets:
                c = self.cells.get((system, optimizer, t))
                if c is None:
                    row[t] = ""
                    continue
                m = f"{100 * c['mean']:.2f}" + ("*" if self.bold(system, optimizer, t, "mean") else "")
                s = f"{100 * c['std']:.2f}" + ("*" if self.bold(system, optimizer, t, "std") else "")
                row[t] = f"{m} +- {s}"
            rows.append(row)
        return _csv_text(fields, rows)


def mismatch_curves(models: dict, cfg: ExperimentConfig, axes_levels: dict) -> list:
    """Sharpness vs shift level; ``models`` maps optimizer -> list of trained models."""
    rows = []
    for axis, levels in axes_levels.items():
        for level in levels:
            ds = generate_shifted_test(cfg.task, ShiftSpec(axis, level)).dataset
            for optimizer, ms in models.items():
                vals = [dataset_sharpness(m, ds, cfg.sharpness, cfg.class_weights).mean for m in ms]
                mean, std = _mean_std(vals)
                rows.append({"system": cfg.system, "optimizer": optimizer, "axis": axis, "level": level,
                             "sharpness_mean": mean, "sharpness_std": std, "n_seeds": len(vals)})
    return rows


DEFAULT_CURVE_LEVELS = {
    "attack": (1, 2, 3, 4),
    "channel": (1, 3, 5),
    "language": (1, 2, 3),
    "speaker": (1, 2, 4, 8),
}


def benchmark(cfg: ExperimentConfig, out_root, curve_levels=None) -> tuple[ResultsTable, list]:
    """Adam and SAM over all seeds; Table-1 style grid and mismatch curves."""
    os.makedirs(out_root, exist_ok=True)
    train_set = generate_train(cfg.task).dataset
    test_sets = build_test_sets(cfg)
    results = []
    models = {}
    for optimizer in ("adam", "sam"):
        run_cfg = cfg.with_(optimizer=optimizer)
        models[optimizer] = []
        for seed in cfg.seeds:
            model, res = train_run(run_cfg, seed, out_root, test_sets, train_set)
            results.append(res)
            models[optimizer].append(model)
    table = ResultsTable.from_results(results)
    curves = mismatch_curves(models, cfg, curve_levels or DEFAULT_CURVE_LEVELS)
    write_results_csv(results, os.path.join(out_root, "results.csv"))
    atomic_write_text(os.path.join(out_root, "table1.csv"), table.to_csv())
    atomic_write_text(os.path.join(out_root, "mismatch_curves.csv"),
                      _csv_text(CURVE_FIELDS, [{**r, "sharpness_mean": repr(r["sharpness_mean"]),
                                                "sharpness_std": repr(r["sharpness_std"])} for r in curves]))
    return table, curves


def rho_sweep(cfg: ExperimentConfig, rhos, out_root, include_adam: bool = True) -> list:
    """Train one system per (rho, seed), plus Adam baselines; returns RunResults."""
    os.makedirs(out_root, exist_ok=True)
    train_set = generate_train(cfg.task).dataset
    test_sets = build_test_sets(cfg)
    results = []
    variants = ([cfg.with_(optimizer="adam")] if include_adam else []) + [
        cfg.with_(optimizer="sam", rho=float(r)) for r in rhos]
    for seed in cfg.seeds:
        for run_cfg in variants:
            results.append(train_run(run_cfg, seed, out_root, test_sets, train_set)[1])
    write_results_csv(load_results(out_root), os.path.join(out_root, "results.csv"))
    return results


def correlate(results_dir, test_sets=None, out_dir=None) -> list:
    """Sharpness-vs-EER correlation per test set from a results directory.

    Reads ``results.csv`` when present, otherwise the per-run ``result.json`` files.
    """
    csv_path = os.path.join(results_dir, "results.csv")
    if os.path.isfile(csv_path):
        rows = read_results_csv(csv_path)
    else:
        rows = result_rows(load_results(results_dir))
    by_set = defaultdict(list)
    for row in rows:
        if row["sharpness"] == "":
            continue
        by_set[row["test_set"]].append(row)
    names = list(test_sets) if test_sets else sorted(by_set)
    reports = []
    for name in names:
        group = by_set.get(name, [])
        if len(group) < 3:
            raise ValueError(f"test set {name!r}: need >= 3 systems with sharpness, have {len(group)}")
        rep = correlate_systems(
            [float(r["sharpness"]) for r in group],
            [float(r["eer"]) for r in group],
            labels=[r["run_id"] for r in group],
            optimizers=[r["optimizer"] for r in group],
            test_set=name,
        )
        reports.append(rep)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_correlation_json(reports, os.path.join(out_dir, "correlation.json"))
        write_correlation_table(reports, os.path.join(out_dir, "table2.csv"))
        scatter = []
        for rep in reports:
            for pt in rep.scatter:
                scatter.append({"test_set": rep.test_set, "sharpness": repr(pt["sharpness"]),
                                "eer": repr(pt["eer"]), "optimizer": pt["optimizer"],
                                "system": pt["system"]})
        atomic_write_text(os.path.join(out_dir, "scatter.csv"),
                          _csv_text(("test_set", "sharpness", "eer", "optimizer", "system"), scatter))
    return reports


def landscape_for_checkpoint(checkpoint, dataset: Dataset, seed: int = 0, half_range: float = 1.0,
                             resolution: int = 41, normalization: str = "filter", class_weights=(0.9, 0.1)):
    model = load_checkpoint(checkpoint)
    dirs = sample_directions(model, seed, normalization)
    return evaluate_grid(model, dataset, dirs, half_range, resolution, class_weights)
