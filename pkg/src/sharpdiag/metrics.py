"""Equal error rate and sharpness/EER correlation statistics."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

SIGNIFICANT = 0.05
HIGHLY_SIGNIFICANT = 0.01


@dataclass(frozen=True)
class ScoreSet:
    """Detector scores; higher means more bona fide."""

    bona_scores: np.ndarray
    spoof_scores: np.ndarray

    def __post_init__(self):
        for name in ("bona_scores", "spoof_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise ValueError(f"{name} is empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite scores")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_labels(cls, scores, labels) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        return cls(scores[labels == 0], scores[labels == 1])


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_bona: int
    n_spoof: int


def interpolate_crossing(thresholds, far, frr):
    """Linearly interpolate the first FAR/FRR crossing on a threshold sweep.

    ``far`` must be non-increasing and ``frr`` non-decreasing in the
    threshold, with ``far[0] > frr[0]`` and ``far[-1] <= frr[-1]``.
    Returns ``(eer, threshold)``.
    """
    k = 0
    while far[k] > frr[k]:
        k += 1
    d0 = far[k - 1] - frr[k - 1]
    d1 = far[k] - frr[k]
    s = d0 / (d0 - d1)
    far_x = far[k - 1] + s * (far[k] - far[k - 1])
    frr_x = frr[k - 1] + s * (frr[k] - frr[k - 1])
    threshold = thresholds[k - 1] + s * (thresholds[k] - thresholds[k - 1])
    return 0.5 * (far_x + frr_x), threshold


def compute_eer(scores: ScoreSet) -> EerResult:
    """EER from a sweep over every distinct score as threshold.

    A trial is accepted when ``score >= threshold``.  FAR counts accepted
    spoofs, FRR rejected bona fide trials.  One extra threshold just above
    the largest score (everything rejected) closes the sweep.
    """
    bona = np.sort(scores.bona_scores)
    spoof = np.sort(scores.spoof_scores)
    top = max(bona[-1], spoof[-1])
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.nextafter(top, np.inf))
    n_b, n_s = bona.size, spoof.size
    frr = np.searchsorted(bona, thresholds, side="left") / n_b
    far = (n_s - np.searchsorted(spoof, thresholds, side="left")) / n_s
    eer, thr = interpolate_crossing(thresholds, far, frr)
    return EerResult(float(eer), float(thr), int(n_b), int(n_s))


def _validate_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("x and y must be 1-d sequences of equal length")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("zero variance")
    return x, y


def _pearson_r(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    # rescale so squared deviations neither underflow nor overflow
    xc = xc / np.abs(xc).max()
    yc = yc / np.abs(yc).max()
    r = np.dot(xc, yc) / math.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    return float(min(1.0, max(-1.0, r)))


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def pearson(x, y):
    """Pearson r and two-sided p-value (Student t, n-2 dof)."""
    x, y = _validate_pair(x, y)
    r = _pearson_r(x, y)
    return r, _t_pvalue(r, x.size)


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y, permutation: bool = False):
    """Spearman rho (Pearson of fractional ranks) and p-value.

    The default p-value uses the t approximation; ``permutation=True``
    enumerates all ``n!`` orderings of ``y`` (n <= 10 only).
    """
    x, y = _validate_pair(x, y)
    rx, ry = fractional_ranks(x), fractional_ranks(y)
    rho = _pearson_r(rx, ry)
    if not permutation:
        return rho, _t_pvalue(rho, x.size)
    if x.size > 10:
        raise ValueError("exact permutation test limited to n <= 10")
    hits = 0
    total = 0
    for perm in itertools.permutations(ry):
        total += 1
        if abs(_pearson_r(rx, np.asarray(perm))) >= abs(rho) - 1e-12:
            hits += 1
    return rho, hits / total


def _tie_sums(x):
    _, counts = np.unique(x, return_counts=True)
    t = counts.astype(np.float64)
    return (t * (t - 1)).sum(), (t * (t - 1) * (2 * t + 5)).sum(), (t * (t - 1) * (t - 2)).sum()


def kendall_tau(x, y):
    """Kendall tau-b with a tie-corrected normal-approximation p-value."""
    x, y = _validate_pair(x, y)
    n = x.size
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    s = float(np.sum(sx * sy))  # concordant minus discordant
    n0 = n * (n - 1) / 2.0
    n1 = float(np.count_nonzero(sx == 0))
    n2 = float(np.count_nonzero(sy == 0))
    tau = s / math.sqrt((n0 - n1) * (n0 - n2))
    tau = min(1.0, max(-1.0, tau))

    tx1, tx2, tx3 = _tie_sums(x)
    ty1, ty2, ty3 = _tie_sums(y)
    var = ((n * (n - 1) * (2 * n + 5) - tx2 - ty2) / 18.0
           + tx1 * ty1 / (2.0 * n * (n - 1))
           + tx3 * ty3 / (9.0 * n * (n - 1) * (n - 2)))
    if var <= 0:
        raise ValueError("zero variance")
    z = s / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return tau, float(min(1.0, p))


@dataclass
class CorrelationReport:
    n: int
    pcc: float
    srcc: float
    ktau: float
    p_pcc: float
    p_srcc: float
    p_ktau: float
    test_set: str = ""
    scatter: list = field(default_factory=list)

    def flags(self, metric: str) -> tuple[bool, bool]:
        p = getattr(self, f"p_{metric}")
        return p <= SIGNIFICANT, p <= HIGHLY_SIGNIFICANT

    def to_dict(self) -> dict:
        d = asdict(self)
        d["significant_0.05"] = {m: self.flags(m)[0] for m in ("pcc", "srcc", "ktau")}
        d["significant_0.01"] = {m: self.flags(m)[1] for m in ("pcc", "srcc", "ktau")}
        return d


def correlate_systems(sharpness, eer, labels=None, optimizers=None, test_set: str = "") -> CorrelationReport:
    """PCC/SRCC/KTAU between per-system sharpness and EER."""
    x, y = _validate_pair(sharpness, eer)
    pcc, p_pcc = pearson(x, y)
    srcc, p_srcc = spearman(x, y)
    ktau, p_ktau = kendall_tau(x, y)
    labels = list(labels) if labels is not None else [f"system_{i}" for i in range(x.size)]
    optimizers = list(optimizers) if optimizers is not None else [""] * x.size
    scatter = [
        {"sharpness": float(a), "eer": float(b), "system": s, "optimizer": o}
        for a, b, s, o in zip(x, y, labels, optimizers)
    ]
    return CorrelationReport(int(x.size), pcc, srcc, ktau, p_pcc, p_srcc, p_ktau, test_set, scatter)


def write_correlation_table(reports, path) -> None:
    """Metric x test-set grid; ``*`` marks p <= 0.05 and ``**`` p <= 0.01."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + [r.test_set for r in reports])
        for metric in ("pcc", "srcc", "ktau"):
            row = [metric.upper()]
            for r in reports:
                sig, high = r.flags(metric)
                mark = "**" if high else "*" if sig else ""
                row.append(f"{getattr(r, metric):.2f}{mark}")
            writer.writerow(row)


def write_correlation_json(reports, path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2, sort_keys=True)
