"""Dense MLP classifier, weighted cross-entropy and exact gradients.

Tensors are plain float64 numpy arrays.  Model weights live in a single flat
``ParamVector`` so that perturbations, gradients and optimizer moments share
one layout and can be combined with BLAS-1 style helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from sharpdiag import kernels

BONA_FIDE = 0
SPOOF = 1
DEFAULT_CLASS_WEIGHTS = (0.9, 0.1)
ACTIVATIONS = {"relu": kernels.RELU, "tanh": kernels.TANH}
CHECKPOINT_FORMAT = "sharpdiag-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(ArithmeticError):
    """A loss, gradient or parameter became NaN/Inf."""


class LayoutMismatch(ValueError):
    pass


def as_tensor(x, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Validate and convert input to a finite, C-contiguous float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericalError(f"{name}: non-finite entry at index {tuple(int(i) for i in bad)}")
    return arr


class LayoutEntry(NamedTuple):
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        expected = 0
        for entry in self.layout:
            if entry.offset != expected:
                raise ValueError(f"layout entry {entry.name!r} at offset {entry.offset}, expected {expected}")
            expected += entry.size
        if expected != self.values.shape[0] or self.values.ndim != 1:
            raise ValueError(f"layout covers {expected} values, vector has shape {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def block(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset:entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def blocks(self) -> Iterator[tuple[LayoutEntry, np.ndarray]]:
        for entry in self.layout:
            yield entry, self.values[entry.offset:entry.offset + entry.size]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)


def _check_layout(x: ParamVector, y: ParamVector) -> None:
    if x.layout != y.layout:
        raise LayoutMismatch("parameter vectors have different layouts")


def param_axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``a * x + y`` as a new vector."""
    _check_layout(x, y)
    return ParamVector(a * x.values + y.values, y.layout)


def param_dot(x: ParamVector, y: ParamVector) -> float:
    _check_layout(x, y)
    return float(np.dot(x.values, y.values))


def param_norm2(x: ParamVector) -> float:
    return float(np.linalg.norm(x.values))


def param_clone(x: ParamVector) -> ParamVector:
    return ParamVector(x.values.copy(), x.layout)


def param_zeros_like(x: ParamVector) -> ParamVector:
    return ParamVector(np.zeros_like(x.values), x.layout)


def mlp_layout(layer_dims: Sequence[int]) -> tuple:
    entries = []
    off = 0
    for i, (fan_in, fan_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
        entries.append(LayoutEntry(f"W{i}", (fan_in, fan_out), off))
        off += fan_in * fan_out
        entries.append(LayoutEntry(f"b{i}", (fan_out,), off))
        off += fan_out
    return tuple(entries)


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_dims: tuple
    activation: str
    params: ParamVector

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"invalid layer dims {dims}")
        if dims[-1] != 2:
            raise ValueError(f"output dimension must be 2 (bona fide, spoof logits), got {dims[-1]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.params.layout != mlp_layout(dims):
            raise LayoutMismatch("parameter layout does not match layer dims")

    @classmethod
    def init(cls, layer_dims: Sequence[int], activation: str = "relu", seed: int = 0) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        layout = mlp_layout(tuple(layer_dims))
        rng = np.random.default_rng(seed)
        values = np.zeros(sum(e.size for e in layout))
        for entry in layout:
            if entry.name.startswith("W"):
                fan_in, fan_out = entry.shape
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                values[entry.offset:entry.offset + entry.size] = rng.uniform(-limit, limit, entry.size)
        return cls(tuple(layer_dims), activation, ParamVector(values, layout))

    @property
    def n_params(self) -> int:
        return len(self.params)

    def with_params(self, params) -> "MlpModel":
        if not isinstance(params, ParamVector):
            params = self.params.with_values(params)
        return MlpModel(self.layer_dims, self.activation, params)

    # kernel-facing views
    @property
    def _dims(self) -> np.ndarray:
        return np.asarray(self.layer_dims, dtype=np.int64)

    @property
    def _act(self) -> int:
        return ACTIVATIONS[self.activation]


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = as_tensor(self.features, ndim=2, name="features")
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError(f"{feats.shape[0]} feature rows but {labels.shape} labels")
        if feats.shape[0] < 1:
            raise ValueError("empty batch")
        if np.any((labels != BONA_FIDE) & (labels != SPOOF)):
            raise ValueError("labels must be 0 (bona fide) or 1 (spoof)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        whole = Batch(self.features, self.labels)
        object.__setattr__(self, "features", whole.features)
        object.__setattr__(self, "labels", whole.labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def n_batches(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)

    def batches(self, batch_size: int, shuffle_seed: int | None = None) -> Iterator[Batch]:
        """Consecutive batches; the last one may be partial.

        With ``shuffle_seed`` the order is a seeded permutation, identical
        for identical seeds.
        """
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        order = np.arange(len(self))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.features[idx], self.labels[idx])

    def concat(self, other: "Dataset", name: str | None = None) -> "Dataset":
        return Dataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            name=name or self.name,
        )


def _sample_weights(labels: np.ndarray, class_weights) -> np.ndarray:
    cw = np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (2,) or np.any(cw <= 0) or not np.all(np.isfinite(cw)):
        raise ValueError(f"class_weights must be two positive floats, got {class_weights}")
    return cw[labels]


def _check_dims(model: MlpModel, batch: Batch) -> None:
    d = batch.features.shape[1]
    if d != model.layer_dims[0]:
        raise ValueError(
            f"layer 0 (W0: {model.layer_dims[0]}x{model.layer_dims[1]}) expects "
            f"{model.layer_dims[0]} input features, batch has {d}"
        )


def forward(model: MlpModel, batch: Batch) -> np.ndarray:
    """Logits of shape (m, 2)."""
    _check_dims(model, batch)
    logits = kernels.mlp_forward(model.params.values, model._dims, model._act, batch.features)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("forward produced non-finite logits")
    return logits


def weighted_cross_entropy(logits, labels, class_weights=DEFAULT_CLASS_WEIGHTS):
    """Per-example ``w[y] * -log softmax(z)[y]`` and their unweighted mean."""
    logits = as_tensor(logits, ndim=2, name="logits")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape != (logits.shape[0],):
        raise ValueError("labels do not match logits rows")
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    per_example = _sample_weights(labels, class_weights) * (lse - logits[np.arange(len(labels)), labels])
    return float(per_example.mean()), per_example


class _EvalCounter:
    """Counts gradient evaluations; read via ``grad_eval_count()``."""

    def __init__(self):
        self.n = 0


_GRAD_EVALS = _EvalCounter()


def grad_eval_count() -> int:
    return _GRAD_EVALS.n


def batch_loss(model: MlpModel, batch: Batch, class_weights=DEFAULT_CLASS_WEIGHTS) -> float:
    """Mean weighted CE without the gradient."""
    _check_dims(model, batch)
    return float(kernels.mlp_loss(
        model.params.values, model._dims, model._act, batch.features, batch.labels,
        _sample_weights(batch.labels, class_weights),
    ))


def loss_and_grad(model: MlpModel, batch: Batch, class_weights=DEFAULT_CLASS_WEIGHTS):
    _check_dims(model, batch)
    loss, grad = kernels.mlp_loss_grad(
        model.params.values, model._dims, model._act, batch.features, batch.labels,
        _sample_weights(batch.labels, class_weights),
    )
    _GRAD_EVALS.n += 1
    return float(loss), ParamVector(grad, model.params.layout)


class Objective:
    """Loss (and gradient) of a fixed model architecture on a fixed batch,
    as a function of the flat parameter values.

    ``sharpness`` and ``optim`` work on anything with this interface, which
    is also how scalar toy losses are plugged in.
    """

    def __init__(self, model: MlpModel, batch: Batch, class_weights=DEFAULT_CLASS_WEIGHTS):
        _check_dims(model, batch)
        self._dims = model._dims
        self._act = model._act
        self._X = batch.features
        self._y = batch.labels
        self._sw = _sample_weights(batch.labels, class_weights)

    def loss(self, w: np.ndarray) -> float:
        return float(kernels.mlp_loss(w, self._dims, self._act, self._X, self._y, self._sw))

    def loss_grad(self, w: np.ndarray):
        loss, grad = kernels.mlp_loss_grad(w, self._dims, self._act, self._X, self._y, self._sw)
        _GRAD_EVALS.n += 1
        return float(loss), grad


class FunctionObjective:
    """Objective from plain callables, e.g. ``0.5 * w @ w``."""

    def __init__(self, loss_fn, grad_fn):
        self._loss = loss_fn
        self._grad = grad_fn

    def loss(self, w):
        return float(self._loss(w))

    def loss_grad(self, w):
        _GRAD_EVALS.n += 1
        return float(self._loss(w)), np.asarray(self._grad(w), dtype=np.float64)


def dataset_loss(model: MlpModel, dataset: Dataset, class_weights=DEFAULT_CLASS_WEIGHTS) -> float:
    return batch_loss(model, dataset.as_batch(), class_weights)


def scores(model: MlpModel, dataset: Dataset) -> np.ndarray:
    """Detection scores: bona fide logit minus spoof logit."""
    logits = forward(model, dataset.as_batch())
    return logits[:, BONA_FIDE] - logits[:, SPOOF]


def save_checkpoint(model: MlpModel, path) -> None:
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"version = {CHECKPOINT_VERSION}",
        f"activation = {model.activation}",
        "layer_dims = " + " ".join(str(d) for d in model.layer_dims),
        f"n_params = {model.n_params}",
        "params",
    ]
    lines.extend(repr(float(v)) for v in model.params.values)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> MlpModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = {}
    i = 0
    while lines[i] != "params":
        key, _, value = lines[i].partition("=")
        header[key.strip()] = value.strip()
        i += 1
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a sharpdiag checkpoint")
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    dims = tuple(int(d) for d in header["layer_dims"].split())
    values = np.array([float(v) for v in lines[i + 1:]], dtype=np.float64)
    if values.shape[0] != int(header["n_params"]):
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {values.shape[0]}")
    return MlpModel(dims, header["activation"], ParamVector(values, mlp_layout(dims)))
