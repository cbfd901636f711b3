"""Experiment configuration (JSON, versioned) and its reproducible hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace

from sharpdiag.optim import AdamConfig, SamConfig
from sharpdiag.sharpness import SharpnessConfig
from sharpdiag.synthbench import ShiftSpec, TaskSpec

SCHEMA_VERSION = 1
OPTIMIZERS = ("adam", "sam")

# fields that do not change what is computed
_UNHASHED = ("output_dir", "name", "seeds")


@dataclass(frozen=True)
class AdamHyper:
    """Adam settings without the step budget, which follows from the data size."""

    lr_max: float = 1e-3
    lr_min: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = TaskSpec()
    shifts: tuple = (
        ShiftSpec("attack", 4),
        ShiftSpec("channel", 5),
        ShiftSpec("language", 3),
        ShiftSpec("speaker", 8),
    )
    hidden_dims: tuple = (64, 64)
    activation: str = "relu"
    optimizer: str = "adam"
    adam: AdamHyper = AdamHyper()
    rho: float = 0.05
    epochs: int = 60
    batch_size: int = 32
    seeds: tuple = (0, 1, 2)
    sharpness: SharpnessConfig = SharpnessConfig()
    class_weights: tuple = (0.9, 0.1)
    output_dir: str = "runs"
    name: str = "experiment"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        self.sam_config(1)  # validates rho

    @property
    def layer_dims(self) -> tuple:
        return (self.task.feature_dim, *self.hidden_dims, 2)

    @property
    def system(self) -> str:
        return f"mlp{'x'.join(str(h) for h in self.hidden_dims)}-{self.activation}"

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.task.n_train // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def adam_config(self) -> AdamConfig:
        return AdamConfig(total_steps=self.total_steps, **asdict(self.adam))

    def sam_config(self, total_steps: int | None = None) -> SamConfig:
        steps = self.total_steps if total_steps is None else total_steps
        return SamConfig(self.rho, AdamConfig(total_steps=steps, **asdict(self.adam)))

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shifts"] = [asdict(s) for s in self.shifts]
        for key in ("hidden_dims", "seeds", "class_weights"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        kwargs = {}
        if "task" in d:
            kwargs["task"] = TaskSpec(**d.pop("task"))
        if "shifts" in d:
            kwargs["shifts"] = tuple(ShiftSpec(**s) for s in d.pop("shifts"))
        if "adam" in d:
            kwargs["adam"] = AdamHyper(**d.pop("adam"))
        if "sharpness" in d:
            kwargs["sharpness"] = SharpnessConfig(**d.pop("sharpness"))
        for key in ("hidden_dims", "seeds", "class_weights"):
            if key in d:
                kwargs[key] = tuple(d.pop(key))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(d)
        return cls(schema_version=version, **kwargs)

    def hash(self) -> str:
        d = self.to_dict()
        for key in _UNHASHED:
            d.pop(key)
        if self.optimizer == "adam":
            d.pop("rho")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
