"""Synthetic bona fide / spoof tasks with controllable domain shift.

Bona fide samples come from a small Gaussian mixture, spoofs from one
Gaussian cluster per training attack.  Every test set is built from the same
base draw as the matched test set (same labels, component assignment and
noise), then modified along one axis:

language
    a fixed offset of norm ``level * language_magnitude`` added to all samples.
attack
    spoof samples are spread evenly over the seen attacks plus ``level`` unseen
    clusters; the total sample count is unchanged.
channel
    samples are split round-robin into ``level`` channel conditions.  Condition
    0 is the clean channel; condition ``c > 0`` applies its own seeded affine
    map plus additive Gaussian noise.
speaker
    each mixture component is split into ``level`` sub-clusters whose centered
    offsets carry part of the component variance, so class means and
    covariances are approximately kept.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from sharpdiag.diffcore import BONA_FIDE, SPOOF, Dataset

AXES = ("language", "attack", "channel", "speaker")
MAX_LEVEL = {"language": 10, "attack": 16, "channel": 16, "speaker": 64}

# disjoint seed namespaces
_NS = {"geometry": 11, "unseen": 23, "train": 31, "eval": 37, "language": 41,
       "channel": 43, "speaker": 47, "label_noise": 53}


def _rng(base_seed: int, namespace: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([base_seed, _NS[namespace], *extra])


@dataclass(frozen=True)
class TaskSpec:
    feature_dim: int = 20
    n_train: int = 1000
    n_eval: int = 2000
    n_train_attacks: int = 6
    class_balance: float = 0.5  # fraction of bona fide samples
    base_seed: int = 0
    bona_components: int = 2
    separation: float = 2.5
    unseen_separation: float = -1.0
    unseen_spread: float = 12.0
    cluster_spread: float = 1.5
    label_noise: float = 0.2  # fraction of flipped training labels
    language_magnitude: float = 1.0
    channel_strength: float = 0.3
    channel_noise: float = 1.5
    channel_offset: float = 0.5
    speaker_spread: float = 0.6

    def __post_init__(self):
        if self.n_train_attacks < 1:
            raise ValueError("n_train_attacks must be >= 1")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if min(self.n_train, self.n_eval) < 4:
            raise ValueError("datasets need at least 4 samples")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie in (0, 1)")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if not 0.0 <= self.speaker_spread < 1.0:
            raise ValueError("speaker_spread must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ShiftSpec:
    axis: str = "attack"
    level: int = 0

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        if not 0 <= self.level <= MAX_LEVEL[self.axis]:
            raise ValueError(f"{self.axis} level must lie in [0, {MAX_LEVEL[self.axis]}]")

    @property
    def name(self) -> str:
        return "matched" if self.level == 0 else f"{self.axis}{self.level}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class GeneratedDataset:
    dataset: Dataset
    task: TaskSpec
    shift: ShiftSpec | None
    split: str
    provenance: dict = field(default_factory=dict)

    @property
    def features(self):
        return self.dataset.features

    @property
    def labels(self):
        return self.dataset.labels

    def __len__(self):
        return len(self.dataset)

    def provenance_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "shift": self.shift.to_dict() if self.shift else None,
            "split": self.split,
            **self.provenance,
        }


class _Geometry:
    """Cluster means and scales derived from ``base_seed``."""

    def __init__(self, task: TaskSpec):
        d = task.feature_dim
        rng = _rng(task.base_seed, "geometry")
        axis = rng.standard_normal(d)
        self.axis = axis / np.linalg.norm(axis)
        self.bona_means = 0.5 * _unit_rows(rng, task.bona_components, d, self.axis)
        self.bona_scales = rng.uniform(0.8, 1.2, (task.bona_components, d))
        self.spoof_means = task.separation * self.axis + task.cluster_spread * _unit_rows(
            rng, task.n_train_attacks, d, self.axis)
        self.spoof_scales = rng.uniform(0.7, 1.3, (task.n_train_attacks, d))
        self.task = task

    def unseen(self, j: int):
        """Mean and scale of unseen attack ``j`` (own seed per cluster)."""
        t = self.task
        rng = _rng(t.base_seed, "unseen", j)
        mean = t.unseen_separation * self.axis + t.unseen_spread * _unit_rows(rng, 1, t.feature_dim, self.axis)[0]
        return mean, rng.uniform(0.7, 1.3, t.feature_dim)


def _unit_rows(rng, k, d, axis):
    # random unit directions orthogonal to ``axis``
    m = rng.standard_normal((k, d))
    m -= np.outer(m @ axis, axis)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _base_draw(task: TaskSpec, n: int, stream: str):
    """Labels, component ids and standard-normal noise for ``n`` samples."""
    rng = _rng(task.base_seed, stream)
    n_bona = int(round(n * task.class_balance))
    labels = np.array([BONA_FIDE] * n_bona + [SPOOF] * (n - n_bona), dtype=np.int64)
    comp = np.empty(n, dtype=np.int64)
    comp[:n_bona] = np.arange(n_bona) % task.bona_components
    comp[n_bona:] = np.arange(n - n_bona) % task.n_train_attacks
    noise = rng.standard_normal((n, task.feature_dim))
    order = rng.permutation(n)
    return labels[order], comp[order], noise[order], rng


def _compose(geo: _Geometry, labels, comp, noise, spoof_means=None, spoof_scales=None):
    spoof_means = geo.spoof_means if spoof_means is None else spoof_means
    spoof_scales = geo.spoof_scales if spoof_scales is None else spoof_scales
    is_bona = labels == BONA_FIDE
    means = np.where(is_bona[:, None], geo.bona_means[comp % len(geo.bona_means)],
                     spoof_means[comp % len(spoof_means)])
    scales = np.where(is_bona[:, None], geo.bona_scales[comp % len(geo.bona_scales)],
                      spoof_scales[comp % len(spoof_scales)])
    return means, scales


def generate_train(task: TaskSpec) -> GeneratedDataset:
    geo = _Geometry(task)
    labels, comp, noise, _ = _base_draw(task, task.n_train, "train")
    means, scales = _compose(geo, labels, comp, noise)
    X = means + scales * noise
    flipped = []
    if task.label_noise > 0:
        rng = _rng(task.base_seed, "label_noise")
        k = int(round(task.label_noise * task.n_train))
        flipped = np.sort(rng.choice(task.n_train, size=k, replace=False))
        labels = labels.copy()
        labels[flipped] = 1 - labels[flipped]
    ds = Dataset(X, labels, name="train")
    return GeneratedDataset(ds, task, None, "train", {"n_flipped": len(flipped)})


def generate_matched_test(task: TaskSpec) -> GeneratedDataset:
    return generate_shifted_test(task, ShiftSpec("attack", 0))


def generate_shifted_test(task: TaskSpec, shift: ShiftSpec) -> GeneratedDataset:
    geo = _Geometry(task)
    labels, comp, noise, rng = _base_draw(task, task.n_eval, "eval")
    means, scales = _compose(geo, labels, comp, noise)
    X = means + scales * noise
    prov = {}
    level = shift.level

    if level == 0:
        pass
    elif shift.axis == "language":
        r = _rng(task.base_seed, "language")
        direction = r.standard_normal(task.feature_dim)
        X = X + (level * task.language_magnitude / np.linalg.norm(direction)) * direction
        prov["offset_norm"] = level * task.language_magnitude
    elif shift.axis == "attack":
        k_seen = task.n_train_attacks
        extra = [geo.unseen(j) for j in range(level)]
        all_means = np.vstack([geo.spoof_means] + [m[None] for m, _ in extra])
        all_scales = np.vstack([geo.spoof_scales] + [s[None] for _, s in extra])
        spoof = labels == SPOOF
        new_comp = comp.copy()
        # round-robin over seen + unseen clusters, in sample order
        new_comp[spoof] = np.arange(int(spoof.sum())) % (k_seen + level)
        means, scales = _compose(geo, labels, new_comp, noise, all_means, all_scales)
        X = means + scales * noise
        prov["unseen_cluster_ids"] = list(range(level))
        prov["n_unseen_samples"] = int(np.sum(spoof & (new_comp >= k_seen)))
    elif shift.axis == "channel":
        group = np.arange(task.n_eval) % level
        X = X.copy()
        seeds = []
        for g in range(1, level):
            r = _rng(task.base_seed, "channel", g)
            d = task.feature_dim
            A = np.eye(d) + task.channel_strength * r.standard_normal((d, d)) / np.sqrt(d)
            b = r.standard_normal(d)
            b *= task.channel_offset / np.linalg.norm(b)
            idx = np.flatnonzero(group == g)
            X[idx] = X[idx] @ A.T + b + task.channel_noise * r.standard_normal((idx.size, d))
            seeds.append([task.base_seed, _NS["channel"], g])
        prov["channel_groups"] = group.tolist()
        prov["channel_seeds"] = seeds
    elif shift.axis == "speaker" and level > 1:
        s = task.speaker_spread
        sub = np.empty(task.n_eval, dtype=np.int64)
        offsets = np.zeros_like(X)
        for lab in (BONA_FIDE, SPOOF):
            n_comp = task.bona_components if lab == BONA_FIDE else task.n_train_attacks
            for c in range(n_comp):
                idx = np.flatnonzero((labels == lab) & (comp == c))
                j = np.arange(idx.size) % level
                sub[idx] = j
                r = _rng(task.base_seed, "speaker", lab, c, level)
                u = r.standard_normal((level, task.feature_dim))
                u -= u.mean(axis=0)
                u /= u.std(axis=0)
                offsets[idx] = u[j]
        X = means + scales * (s * offsets + np.sqrt(1.0 - s * s) * noise)
        prov["speaker_subclusters"] = level

    ds = Dataset(X, labels, name=shift.name)
    return GeneratedDataset(ds, task, shift, "test", prov)


def dataset_digest(ds) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.features).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()


def write_dataset(gen: GeneratedDataset, csv_path, json_path=None) -> None:
    """CSV with ``feature_0..feature_{d-1},label`` plus a JSON provenance sidecar."""
    ds = gen.dataset
    d = ds.feature_dim
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(d)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    if json_path is not None:
        meta = gen.provenance_dict()
        meta["sha256"] = dataset_digest(ds)
        meta["n_samples"] = len(ds)
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def read_dataset(csv_path, name=None) -> Dataset:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label" or not all(h.startswith("feature_") for h in header[:-1]):
            raise ValueError(f"{csv_path}: unexpected header")
        rows = list(reader)
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    return Dataset(X, y, name=name or str(csv_path))
