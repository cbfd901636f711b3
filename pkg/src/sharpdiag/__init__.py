"""Sharpness diagnostics for binary spoof detectors under domain shift.

Small MLP detectors with a hand-written backward pass, SAM/Adam training,
m-sharpness estimation, loss landscapes, EER and rank-correlation metrics,
and a synthetic shift benchmark.
"""

from sharpdiag.diffcore import (
    Batch,
    Dataset,
    LayoutMismatch,
    MlpModel,
    NumericalError,
    ParamVector,
    forward,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    weighted_cross_entropy,
)
from sharpdiag.kernels import BACKEND
from sharpdiag.landscape import evaluate_grid, sample_directions
from sharpdiag.metrics import ScoreSet, compute_eer, correlate_systems
from sharpdiag.optim import AdamConfig, AdamState, SamConfig, adam_step, sam_step
from sharpdiag.sharpness import SharpnessConfig, dataset_sharpness
from sharpdiag.synthbench import ShiftSpec, TaskSpec, generate_shifted_test, generate_train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Batch", "Dataset", "LayoutMismatch", "MlpModel", "NumericalError", "ParamVector",
    "forward", "load_checkpoint", "loss_and_grad", "save_checkpoint", "weighted_cross_entropy",
    "evaluate_grid", "sample_directions", "ScoreSet", "compute_eer", "correlate_systems",
    "AdamConfig", "AdamState", "SamConfig", "adam_step", "sam_step",
    "SharpnessConfig", "dataset_sharpness", "ShiftSpec", "TaskSpec", "generate_shifted_test",
    "generate_train",
]
