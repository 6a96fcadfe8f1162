"""Label-skew and quantity-skew partitioning of a training set across devices.

Pipeline (``build_partition``):

1. ``allocate_labels``: every device gets ``k`` distinct labels.
2. ``distribute_samples``: each label's samples are dealt out evenly and
   without repetition to the devices holding it; each device pool is split
   80/10/10 into train/val/test; train shards are then trimmed to ``s`` or
   topped up to ``s`` by sampling with replacement from the device's labels.
3. ``apply_quantity_skew``: each device keeps a random fraction in
   ``[1 - var, 1]`` of its train shard.

Each phase draws from its own stream derived from the master seed, so e.g.
changing ``var`` leaves the label allocation untouched.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedskew import __version__
from fedskew._rng import derive_rng
from fedskew.datasets import Dataset


@dataclass(frozen=True)
class LabelAllocation:
    per_device_labels: tuple[tuple[int, ...], ...]
    k: int
    n_classes: int

    @property
    def n_devices(self) -> int:
        return len(self.per_device_labels)

    def holders(self, label: int) -> list[int]:
        return [d for d, labels in enumerate(self.per_device_labels) if label in labels]


@dataclass(frozen=True, eq=False)
class ClientShard:
    device_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    resampled_count: int = 0

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def replace_train(self, train_idx, resampled_count: int | None = None) -> "ClientShard":
        return ClientShard(self.device_id, train_idx, self.val_idx, self.test_idx,
                           self.resampled_count if resampled_count is None else resampled_count)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "train_idx": self.train_idx.tolist(),
            "val_idx": self.val_idx.tolist(),
            "test_idx": self.test_idx.tolist(),
            "resampled_count": self.resampled_count,
        }

    def __eq__(self, other):
        if not isinstance(other, ClientShard):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(eq=False)
class PartitionManifest:
    allocation: LabelAllocation
    shards: list[ClientShard]
    s: int
    var: float
    seed: int
    dataset_name: str = ""
    dataset_size: int = 0
    label_names: tuple[str, ...] = ()
    emd: float | None = None
    keep_fractions: list[float] = field(default_factory=list)

    @property
    def n_devices(self) -> int:
        return self.allocation.n_devices

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "dataset": {"name": self.dataset_name, "size": self.dataset_size,
                        "n_classes": self.allocation.n_classes, "label_names": list(self.label_names)},
            "k": self.allocation.k,
            "n_devices": self.allocation.n_devices,
            "s": self.s,
            "var": self.var,
            "seed": self.seed,
            "emd": self.emd,
            "allocation": [list(labels) for labels in self.allocation.per_device_labels],
            "keep_fractions": list(self.keep_fractions),
            "shards": [shard.to_dict() for shard in self.shards],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionManifest":
        allocation = LabelAllocation(tuple(tuple(labels) for labels in doc["allocation"]),
                                     doc["k"], doc["dataset"]["n_classes"])
        shards = [ClientShard(s["device_id"], s["train_idx"], s["val_idx"], s["test_idx"], s["resampled_count"])
                  for s in doc["shards"]]
        return cls(allocation, shards, doc["s"], doc["var"], doc["seed"], doc["dataset"]["name"],
                   doc["dataset"]["size"], tuple(doc["dataset"]["label_names"]), doc["emd"],
                   list(doc["keep_fractions"]))

    @classmethod
    def from_json(cls, text: str) -> "PartitionManifest":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PartitionManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        """Content hash that ignores the (derived) EMD field."""
        doc = self.to_dict()
        doc.pop("emd")
        return hashlib.sha256(json.dumps(doc, separators=(",", ":")).encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, PartitionManifest):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def allocate_labels(k: int, n_classes: int, n_devices: int, rng: np.random.Generator) -> LabelAllocation:
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must lie in [1, {n_classes}], got {k}")
    if n_devices < 1:
        raise ValueError("need at least one device")
    per_device = tuple(tuple(sorted(int(c) for c in rng.choice(n_classes, size=k, replace=False)))
                       for _ in range(n_devices))
    return LabelAllocation(per_device, k, n_classes)


def _split_pool(pool: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # floor for val and test, remainder to train
    n_val = n_test = len(pool) // 10
    n_train = len(pool) - n_val - n_test
    return pool[:n_train], pool[n_train:n_train + n_val], pool[n_train + n_val:]


def deal_labels(labels: np.ndarray, allocation: LabelAllocation, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-device pools before any splitting; no index appears in two pools."""
    labels = np.asarray(labels)
    pools: list[list[np.ndarray]] = [[] for _ in range(allocation.n_devices)]
    for label in range(allocation.n_classes):
        holders = allocation.holders(label)
        if not holders:
            continue
        rows = np.flatnonzero(labels == label)
        if len(rows) == 0:
            raise ValueError(f"label {label} is allocated but has no samples")
        rows = rng.permutation(rows)
        per_device = len(rows) // len(holders)
        for j, device in enumerate(holders):
            pools[device].append(rows[j * per_device:(j + 1) * per_device])
    return [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in pools]


def distribute_samples(labels: np.ndarray, allocation: LabelAllocation, s: int,
                       rng: np.random.Generator) -> list[ClientShard]:
    """Deal samples to devices, split 80/10/10, then enforce ``s`` train samples.

    ``labels`` are the training-set labels; shard indices refer to its rows.
    Top-up draws with replacement from all rows whose label the device holds,
    excluding the device's own val/test rows.
    """
    if s < 1:
        raise ValueError(f"s must be at least 1, got {s}")
    labels = np.asarray(labels)
    pools = deal_labels(labels, allocation, rng)
    shards = []
    for device, pool in enumerate(pools):
        train, val, test = _split_pool(rng.permutation(pool))
        added = 0
        if len(train) > s:
            train = rng.permutation(train)[:s]
        elif len(train) < s:
            held = np.isin(labels, allocation.per_device_labels[device])
            held[val] = False
            held[test] = False
            candidates = np.flatnonzero(held)
            if len(candidates) == 0:
                raise ValueError(f"device {device} has no samples available for top-up")
            added = s - len(train)
            train = np.concatenate([train, rng.choice(candidates, size=added, replace=True)])
        shards.append(ClientShard(device, train, val, test, added))
    return shards


def apply_quantity_skew(shards: list[ClientShard], var: float, rng: np.random.Generator):
    """Keep ``ceil(f * |train|)`` train samples per device, ``f ~ U[1 - var, 1]``.

    Returns ``(shards, keep_fractions)``. Retained samples keep their original
    order, so ``var = 0`` is the identity.
    """
    if not 0.0 <= var <= 1.0:
        raise ValueError(f"var must lie in [0, 1], got {var}")
    out, fractions = [], []
    for shard in shards:
        n = len(shard.train_idx)
        if n == 0:
            raise ValueError(f"device {shard.device_id} has an empty train shard")
        keep = float(rng.uniform(1.0 - var, 1.0)) if var > 0 else 1.0
        m = min(n, max(1, math.ceil(keep * n - 1e-9)))
        positions = np.sort(rng.permutation(n)[:m])
        out.append(shard.replace_train(shard.train_idx[positions]))
        fractions.append(keep)
    return out, fractions


def build_partition(dataset: Dataset, k: int, n_devices: int, s: int, var: float, seed: int) -> PartitionManifest:
    allocation = allocate_labels(k, dataset.n_classes, n_devices, derive_rng(seed, "partition", "allocate"))
    shards = distribute_samples(dataset.labels, allocation, s, derive_rng(seed, "partition", "distribute"))
    shards, fractions = apply_quantity_skew(shards, var, derive_rng(seed, "partition", "skew"))
    return PartitionManifest(allocation, shards, s, var, seed, dataset.name, len(dataset),
                             dataset.label_names, None, fractions)
