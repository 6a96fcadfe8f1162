"""Label-distribution distances between devices and the IID-level scale.

Distances are 1-Wasserstein (earth mover's) distances on the label index line
with ground cost ``|i - j|``. Label order is semantically arbitrary for image
classes, but this metric is what the reference EMD scale is calibrated on: a
system of single-label devices with uniformly random labels averages
``E|i - j|`` (3.3 for 10 classes, 16/7 for 7), not the 2.0 an L1 distance would
give.
"""

from __future__ import annotations

import csv
import enum
from itertools import combinations

import numpy as np

from fedskew._rng import derive_seed
from fedskew.datasets import Dataset
from fedskew.partition import ClientShard, build_partition


class IidLevel(str, enum.Enum):
    LOW = "Low"
    MODERATE = "Moderate"
    HIGH = "High"


# n_classes -> (lower edge of Moderate, upper edge of Moderate); both inclusive
IID_THRESHOLDS = {10: (1.2, 2.2), 7: (1.0, 1.7)}


def label_histogram(shard: ClientShard, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Normalised label counts over the shard's train samples."""
    if len(shard.train_idx) == 0:
        raise ValueError(f"device {shard.device_id} has an empty train shard")
    counts = np.bincount(np.asarray(labels)[shard.train_idx], minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def pairwise_emd(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    return float(np.abs(np.cumsum(p - q)[:-1]).sum())


def emd_matrix_mean(dists: np.ndarray) -> float:
    """Mean EMD over all unordered pairs of rows."""
    if len(dists) < 2:
        raise ValueError("need at least two distributions")
    cdf = np.cumsum(dists, axis=1)[:, :-1]
    total = 0.0
    for i in range(len(cdf) - 1):
        total += np.abs(cdf[i + 1:] - cdf[i]).sum()
    n = len(cdf)
    return float(total / (n * (n - 1) / 2))


def system_emd(shards, labels: np.ndarray, n_classes: int) -> float:
    """Average pairwise EMD over every pair of devices."""
    if len(shards) < 2:
        raise ValueError("system EMD needs at least two devices")
    return emd_matrix_mean(np.array([label_histogram(s, labels, n_classes) for s in shards]))


def system_emd_pairs(shards, labels, n_classes) -> float:
    """Straight pair-by-pair version of :func:`system_emd` (used as a cross-check)."""
    hists = [label_histogram(s, labels, n_classes) for s in shards]
    scores = [pairwise_emd(a, b) for a, b in combinations(hists, 2)]
    return float(np.mean(scores))


def classify_iid(emd: float, n_classes: int) -> IidLevel:
    if n_classes not in IID_THRESHOLDS:
        raise ValueError(f"IID thresholds are only calibrated for {sorted(IID_THRESHOLDS)} classes, got {n_classes}")
    lo, hi = IID_THRESHOLDS[n_classes]
    if emd > hi:
        return IidLevel.LOW
    if emd >= lo:
        return IidLevel.MODERATE
    return IidLevel.HIGH


def emd_sweep(dataset: Dataset, ks, variances, n_devices: int, s: int, trials: int, seed: int):
    """EMD for every (k, var) cell over ``trials`` seeded partitions.

    Returns ``(trial_rows, mean_rows)``: ``(k, var, trial, emd)`` tuples and
    ``(k, var, mean_emd)`` tuples, both ordered by k then var.
    """
    ks, variances = list(ks), list(variances)
    if not ks or not variances or trials < 1:
        raise ValueError("sweep needs at least one k, one var and one trial")
    trial_rows, mean_rows = [], []
    for k in ks:
        for var in variances:
            scores = []
            for t in range(trials):
                manifest = build_partition(dataset, k, n_devices, s, var, derive_seed(seed, "sweep", t))
                scores.append(system_emd(manifest.shards, dataset.labels, dataset.n_classes))
                trial_rows.append((k, var, t, scores[-1]))
            mean_rows.append((k, var, float(np.mean(scores))))
    return trial_rows, mean_rows


def write_sweep_csv(trial_rows, mean_rows, trials_path, means_path, meta: str | None = None) -> None:
    """Write the per-trial and per-cell CSVs; ``meta`` becomes a leading ``#`` line."""
    for path, header, rows in ((trials_path, ["k", "var", "trial", "emd"], trial_rows),
                               (means_path, ["k", "var", "mean_emd"], mean_rows)):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if meta:
                fh.write(f"# {meta}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
