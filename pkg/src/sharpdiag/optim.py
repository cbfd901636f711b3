"""Adam with decoupled weight decay, cosine annealing, and the SAM wrapper.

SAM step on a batch::

    g1   = grad L(w)
    eps  = rho * g1 / ||g1||_2
    g2   = grad L(w + eps)          # same batch
    w'   = base_update(w, g2)       # w itself is never modified

The perturbation uses the signed gradient; an elementwise ``|g|`` numerator
would not point along the first-order ascent direction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from sharpdiag.diffcore import (
    Batch,
    DEFAULT_CLASS_WEIGHTS,
    MlpModel,
    NumericalError,
    Objective,
    ParamVector,
    param_norm2,
    param_zeros_like,
    _check_layout,
)

DEGENERATE_GRAD_NORM = 1e-12
PAPER_RHO_GRID = (0.05, 0.01, 0.005, 0.001)


@dataclass(frozen=True)
class AdamConfig:
    lr_max: float = 1e-4
    lr_min: float = 5e-6
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    base: AdamConfig = AdamConfig()

    def __post_init__(self):
        if not (0.0 < self.rho <= 1.0):
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")


@dataclass
class AdamState:
    first_moment: ParamVector
    second_moment: ParamVector
    step_count: int = 0

    @classmethod
    def zeros_like(cls, w: ParamVector) -> "AdamState":
        return cls(param_zeros_like(w), param_zeros_like(w), 0)


@dataclass(frozen=True)
class StepReport:
    step: int
    lr: float
    loss_w: float
    loss_w_plus_eps: float
    eps_norm: float
    degenerate: bool

    LOG_FIELDS = ("step", "lr", "loss_w", "loss_w_plus_eps", "eps_norm", "degenerate_flag")

    def log_row(self) -> list:
        return [self.step, repr(self.lr), repr(self.loss_w), repr(self.loss_w_plus_eps),
                repr(self.eps_norm), int(self.degenerate)]


def cosine_lr(cfg: AdamConfig, step: int) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step == 0 or cfg.total_steps == 0:
        return cfg.lr_max
    if step == cfg.total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def _first_nonfinite(values: np.ndarray):
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def adam_step(state: AdamState, cfg: AdamConfig, w: ParamVector, grad: ParamVector, step: int) -> ParamVector:
    """One AdamW update at the scheduled learning rate; advances ``state``."""
    _check_layout(w, grad)
    _check_layout(w, state.first_moment)
    bad = _first_nonfinite(grad.values)
    if bad is not None:
        raise NumericalError(f"non-finite gradient at coordinate {bad}")
    lr = cosine_lr(cfg, step)
    g = grad.values
    t = state.step_count + 1
    m = cfg.beta1 * state.first_moment.values + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.second_moment.values + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    new = w.values - lr * cfg.weight_decay * w.values
    new = new - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    state.first_moment = ParamVector(m, w.layout)
    state.second_moment = ParamVector(v, w.layout)
    state.step_count = t
    return ParamVector(new, w.layout)


def sgd_update(lr: float):
    """Plain gradient descent ``w - lr * g`` as a SAM base (used for analytic checks)."""
    def update(w: np.ndarray, g: np.ndarray) -> np.ndarray:
        return w - lr * g
    return update


def sam_perturbation(w: ParamVector, grad: ParamVector, rho: float) -> ParamVector:
    """First-order worst-case perturbation ``rho * g / ||g||``.

    Returns zeros when ``||g|| <= DEGENERATE_GRAD_NORM``.
    """
    _check_layout(w, grad)
    norm = param_norm2(grad)
    if norm <= DEGENERATE_GRAD_NORM:
        return param_zeros_like(grad)
    return ParamVector(grad.values * (rho / norm), grad.layout)


def sam_descent(w: np.ndarray, objective, rho: float, update, force_zero_perturbation: bool = False):
    """Generic two-evaluation SAM step on flat values.

    ``update(w, g2)`` applies the base optimizer.  Returns
    ``(new_w, loss_w, loss_w_plus_eps, eps_norm, degenerate)``.
    """
    loss_w, g1 = objective.loss_grad(w)
    norm = float(np.linalg.norm(g1))
    degenerate = force_zero_perturbation or norm <= DEGENERATE_GRAD_NORM
    if degenerate:
        # plain base step on g1
        return update(w, g1), loss_w, loss_w, 0.0, True
    eps = g1 * (rho / norm)
    loss_pert, g2 = objective.loss_grad(w + eps)
    if not math.isfinite(loss_pert):
        raise NumericalError("non-finite loss at the perturbed point")
    return update(w, g2), loss_w, loss_pert, float(np.linalg.norm(eps)), False


def sam_step(model: MlpModel, batch: Batch, state: AdamState, sam: SamConfig, step: int,
             class_weights=DEFAULT_CLASS_WEIGHTS, force_zero_perturbation: bool = False):
    """SAM-wrapped Adam step; returns ``(new_params, StepReport)``."""
    w = model.params
    objective = Objective(model, batch, class_weights)

    def update(values, g):
        return adam_step(state, sam.base, w, ParamVector(g, w.layout), step).values

    new, loss_w, loss_pert, eps_norm, degenerate = sam_descent(
        w.values, objective, sam.rho, update, force_zero_perturbation)
    report = StepReport(step, cosine_lr(sam.base, step), loss_w, loss_pert, eps_norm, degenerate)
    return ParamVector(new, w.layout), report


def plain_step(model: MlpModel, batch: Batch, state: AdamState, cfg: AdamConfig, step: int,
               class_weights=DEFAULT_CLASS_WEIGHTS):
    """Adam step with the same reporting as ``sam_step``."""
    w = model.params
    loss, g = Objective(model, batch, class_weights).loss_grad(w.values)
    new = adam_step(state, cfg, w, ParamVector(g, w.layout), step)
    return new, StepReport(step, cosine_lr(cfg, step), loss, loss, 0.0, False)


class StepLog:
    """Per-run CSV of step reports."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(StepReport.LOG_FIELDS)

    def write(self, report: StepReport) -> None:
        self._writer.writerow(report.log_row())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def config_dict(cfg) -> dict:
    return asdict(cfg)
