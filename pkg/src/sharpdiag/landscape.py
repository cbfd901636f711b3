"""2-D loss surfaces along two random directions around trained weights."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from sharpdiag.diffcore import DEFAULT_CLASS_WEIGHTS, Dataset, MlpModel, ParamVector
from sharpdiag import kernels
from sharpdiag.diffcore import _sample_weights

NORMALIZATIONS = ("filter", "global", "none")


@dataclass
class DirectionPair:
    d1: ParamVector
    d2: ParamVector
    seed: int
    normalization: str
    zeroed_blocks: list = field(default_factory=list)


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # NaN marks a non-finite evaluation
    origin_loss: float
    seed: int
    dataset_id: str
    overflow: int = 0

    @property
    def spread(self) -> float:
        return grid_spread(self)

    def to_dict(self) -> dict:
        return {
            "alphas": [float(a) for a in self.alphas],
            "betas": [float(b) for b in self.betas],
            "losses": [[None if math.isnan(v) else float(v) for v in row] for row in self.losses],
            "origin_loss": self.origin_loss,
            "seed": self.seed,
            "dataset_id": self.dataset_id,
            "overflow": self.overflow,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_csv(self, path) -> None:
        """Long format ``alpha,beta,loss``; non-finite points are written as ``nan``."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["alpha", "beta", "loss"])
            for i, a in enumerate(self.alphas):
                for j, b in enumerate(self.betas):
                    writer.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])


def sample_directions(model: MlpModel, seed: int, normalization: str = "filter") -> DirectionPair:
    """Two independent Gaussian directions in weight space.

    ``filter`` rescales every layout block (each weight matrix and each bias
    vector) to the norm of the matching block of the model weights;
    ``global`` rescales the whole vector to the weight norm.
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    w = model.params
    if not np.all(np.isfinite(w.values)):
        raise ValueError("model parameters are not finite")
    rng = np.random.default_rng(seed)
    raw = [rng.standard_normal(len(w)), rng.standard_normal(len(w))]
    zeroed = []
    if normalization == "filter":
        for d in raw:
            for entry, wb in w.blocks():
                sl = slice(entry.offset, entry.offset + entry.size)
                w_norm = np.linalg.norm(wb)
                if w_norm == 0.0:
                    d[sl] = 0.0
                    if entry.name not in zeroed:
                        zeroed.append(entry.name)
                else:
                    d[sl] *= w_norm / np.linalg.norm(d[sl])
    elif normalization == "global":
        w_norm = np.linalg.norm(w.values)
        for d in raw:
            d *= w_norm / np.linalg.norm(d)
    return DirectionPair(ParamVector(raw[0], w.layout), ParamVector(raw[1], w.layout),
                         seed, normalization, zeroed)


def grid_coords(half_range: float, resolution: int) -> np.ndarray:
    """``resolution`` points on [-h, h] with an exact zero in the middle.

    Point ``i`` is ``h * (2i - (r-1)) / (r-1)``: a grid of ``2r - 1`` points
    reproduces the coarse coordinates bit-for-bit at even indices.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError("resolution must be a positive odd integer")
    if half_range <= 0:
        raise ValueError("half_range must be positive")
    if resolution == 1:
        return np.zeros(1)
    k = resolution - 1
    return np.array([half_range * ((2 * i - k) / k) for i in range(resolution)])


def evaluate_grid(model: MlpModel, dataset: Dataset, dirs: DirectionPair, half_range: float = 1.0,
                  resolution: int = 41, class_weights=DEFAULT_CLASS_WEIGHTS) -> LandscapeGrid:
    """Full-dataset weighted CE at ``w + alpha*d1 + beta*d2`` on a square grid."""
    alphas = grid_coords(half_range, resolution)
    betas = alphas.copy()
    w = model.params.values
    d1 = dirs.d1.values
    d2 = dirs.d2.values
    dims = model._dims
    act = model._act
    X = dataset.features
    y = dataset.labels
    sw = _sample_weights(y, class_weights)

    losses = np.empty((resolution, resolution))
    overflow = 0
    with np.errstate(all="ignore"):
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                if a == 0.0 and b == 0.0:
                    point = w
                else:
                    point = w + a * d1 + b * d2
                val = float(kernels.mlp_loss(point, dims, act, X, y, sw))
                if not math.isfinite(val):
                    val = math.nan
                    overflow += 1
                losses[i, j] = val
    origin = float(kernels.mlp_loss(w, dims, act, X, y, sw))
    return LandscapeGrid(alphas, betas, losses, origin, dirs.seed, dataset.name, overflow)


def grid_spread(grid: LandscapeGrid) -> float:
    """max - min over the finite grid losses."""
    finite = grid.losses[np.isfinite(grid.losses)]
    return float(finite.max() - finite.min())
