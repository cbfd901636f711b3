"""m-sharpness: worst-case loss increase inside an L2 ball, per batch.

For one batch the inner maximum is estimated as the best of

* ``eps = 0`` (so the value is never negative),
* the one-step point ``rho * g / ||g||``,
* ``restarts`` runs of normalized projected gradient ascent from uniform
  random starts in the ball, keeping the best iterate of each run.

A dataset value is the mean over consecutive batches of size ``m``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from sharpdiag.diffcore import (
    Batch,
    DEFAULT_CLASS_WEIGHTS,
    Dataset,
    MlpModel,
    NumericalError,
    Objective,
)


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float = 0.05
    batch_size: int = 32
    ascent_steps: int = 20
    ascent_lr: float | None = None  # defaults to rho / 10
    restarts: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.ascent_steps < 1 or self.restarts < 1 or self.batch_size < 1:
            raise ValueError("ascent_steps, restarts and batch_size must be >= 1")

    @property
    def step_size(self) -> float:
        return self.rho / 10.0 if self.ascent_lr is None else self.ascent_lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ascent_lr"] = self.step_size
        return d


@dataclass
class AscentResult:
    value: float
    eps: np.ndarray
    source: str
    discarded: int = 0


def _project(eps: np.ndarray, rho: float) -> np.ndarray:
    norm = np.linalg.norm(eps)
    if norm > rho:
        return eps * (rho / norm)
    return eps


def uniform_ball(rng: np.random.Generator, n: int, rho: float) -> np.ndarray:
    direction = rng.standard_normal(n)
    direction /= np.linalg.norm(direction)
    return direction * (rho * rng.uniform() ** (1.0 / n))


def max_loss_increase(objective, w: np.ndarray, cfg: SharpnessConfig, rng: np.random.Generator) -> AscentResult:
    """Estimate ``max_{||eps|| <= rho} L(w + eps) - L(w)`` for one objective."""
    base, g = objective.loss_grad(w)
    if not math.isfinite(base):
        raise NumericalError("non-finite loss at the unperturbed weights")
    n = w.shape[0]
    best = AscentResult(0.0, np.zeros(n), "zero")

    def consider(value, eps, source):
        nonlocal best
        if value > best.value:
            best = AscentResult(value, eps.copy(), source, best.discarded)

    discarded = 0
    g_norm = np.linalg.norm(g)
    if g_norm > 1e-12:
        eps = g * (cfg.rho / g_norm)
        val = objective.loss(w + eps) - base
        if math.isfinite(val):
            consider(val, eps, "one_step")
        else:
            discarded += 1

    # starts drawn up front so runs with more steps extend runs with fewer
    starts = [uniform_ball(rng, n, cfg.rho) for _ in range(cfg.restarts)]
    lr = cfg.step_size
    for r, eps in enumerate(starts):
        for _ in range(cfg.ascent_steps):
            loss, grad = objective.loss_grad(w + eps)
            if not math.isfinite(loss):
                discarded += 1
                break
            consider(loss - base, eps, f"ascent_{r}")
            gn = np.linalg.norm(grad)
            if gn <= 1e-12:
                break
            eps = _project(eps + lr * grad / gn, cfg.rho)
        else:
            val = objective.loss(w + eps) - base
            if math.isfinite(val):
                consider(val, eps, f"ascent_{r}")
            else:
                discarded += 1
    best.discarded = discarded
    return best


def batch_sharpness(model: MlpModel, batch: Batch, cfg: SharpnessConfig = SharpnessConfig(),
                    class_weights=DEFAULT_CLASS_WEIGHTS, rng: np.random.Generator | None = None) -> float:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return max_loss_increase(Objective(model, batch, class_weights), model.params.values, cfg, rng).value


@dataclass
class SharpnessReport:
    per_batch: list
    mean: float
    std: float
    config: dict
    model_id: str = ""
    dataset_id: str = ""
    partial_last_batch: bool = False
    discarded_candidates: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    CSV_FIELDS = ("model_id", "dataset_id", "rho", "batch_size", "n_batches", "mean", "std")

    def csv_row(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "rho": self.config["rho"],
            "batch_size": self.config["batch_size"],
            "n_batches": len(self.per_batch),
            "mean": repr(self.mean),
            "std": repr(self.std),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def dataset_sharpness(model: MlpModel, dataset: Dataset, cfg: SharpnessConfig = SharpnessConfig(),
                      class_weights=DEFAULT_CLASS_WEIGHTS, model_id: str = "") -> SharpnessReport:
    """Average m-sharpness over the dataset in its stored order.

    Every batch uses a fresh generator seeded with ``cfg.seed``, so a batch's
    value depends only on its contents.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    per_batch = []
    discarded = 0
    w = model.params.values
    for batch in dataset.batches(cfg.batch_size):
        res = max_loss_increase(Objective(model, batch, class_weights), w, cfg,
                                np.random.default_rng(cfg.seed))
        per_batch.append(float(res.value))
        discarded += res.discarded
    arr = np.asarray(per_batch)
    return SharpnessReport(
        per_batch=per_batch,
        mean=float(arr.mean()),
        std=float(arr.std()),
        config=cfg.to_dict(),
        model_id=model_id,
        dataset_id=dataset.name,
        partial_last_batch=len(dataset) % cfg.batch_size != 0,
        discarded_candidates=discarded,
    )
