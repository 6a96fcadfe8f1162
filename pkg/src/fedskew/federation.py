"""Communication rounds: select devices, train locally, aggregate, evaluate."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from fedskew import __version__
from fedskew._rng import derive_rng
from fedskew.aggregators import (AggregatorState, Kind, LocalConfig, aggregate, init_aggregator,
                                 local_train)
from fedskew.datasets import Dataset
from fedskew.heterogeneity import classify_iid, system_emd
from fedskew.nn import mlp, predict
from fedskew.partition import PartitionManifest, build_partition

SELECTIONS = ("uniform", "loss_biased")
EVAL_SETS = ("shards", "global")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synth"
    aggregator: str = "FedAvg"
    n_devices: int = 30
    active_count: int = 6
    rounds: int = 100
    k: int = 10
    s: int = 300
    var: float = 0.0
    local: LocalConfig = field(default_factory=LocalConfig)
    hidden: tuple[int, ...] = (200,)
    dropout: float = 0.0
    seed: int = 0
    selection: str = "uniform"
    eval_on: str = "shards"

    def __post_init__(self):
        object.__setattr__(self, "aggregator", Kind.parse(self.aggregator).value)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.local, dict):
            object.__setattr__(self, "local", LocalConfig(**self.local))
        if not 1 <= self.active_count <= self.n_devices:
            raise ValueError(f"active_count must lie in [1, {self.n_devices}], got {self.active_count}")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.eval_on not in EVAL_SETS:
            raise ValueError(f"eval_on must be one of {EVAL_SETS}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        doc["local"]["personal_tags"] = list(self.local.personal_tags)
        return doc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    macro_f1: float
    mean_train_loss: float
    wall_time: float

    def log_line(self, **extra) -> str:
        doc = {"round": self.round, "f1": self.macro_f1, "loss": self.mean_train_loss,
               "selected": list(self.selected), **extra}
        return json.dumps(doc, separators=(",", ":"))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    manifest: PartitionManifest
    curve: list[RoundRecord]
    emd: float
    iid_level: str | None
    state: AggregatorState | None = None

    @property
    def f1_curve(self) -> list[float]:
        return [r.macro_f1 for r in self.curve]

    @property
    def best_round(self) -> int:
        values = self.f1_curve
        return values.index(max(values)) + 1

    @property
    def best_f1(self) -> float:
        return max(self.f1_curve)

    def summary(self) -> dict:
        return {
            "schema_version": 1,
            "version": __version__,
            "config_hash": self.config.digest(),
            "config": self.config.to_dict(),
            "manifest_digest": self.manifest.digest(),
            "emd": self.emd,
            "iid_level": self.iid_level,
            "best_f1": self.best_f1,
            "best_round": self.best_round,
            "curve": self.f1_curve,
        }


def select_active(n_devices: int, active_count: int, round_no: int, seed: int) -> list[int]:
    """Uniform sample without replacement, keyed only by (seed, round)."""
    if not 1 <= active_count <= n_devices:
        raise ValueError(f"active_count must lie in [1, {n_devices}]")
    rng = derive_rng(seed, "select", round_no)
    return sorted(int(d) for d in rng.choice(n_devices, size=active_count, replace=False))


def select_loss_biased(n_devices: int, active_count: int, last_loss: dict[int, float]) -> list[int]:
    """The ``active_count`` devices with the highest last known loss; never-seen devices first."""
    key = [(-last_loss.get(d, np.inf), d) for d in range(n_devices)]
    return sorted(d for _, d in sorted(key)[:active_count])


def macro_f1(predictions, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0 or len(predictions) != len(labels):
        raise ValueError("need equal-length, non-empty predictions and labels")
    scores = []
    for c in range(n_classes):
        actual = labels == c
        if not actual.any():
            continue
        predicted = predictions == c
        tp = np.count_nonzero(actual & predicted)
        denom = actual.sum() + predicted.sum()
        scores.append(2.0 * tp / denom)
    return float(np.mean(scores))


def evaluate(state: AggregatorState, manifest: PartitionManifest, dataset: Dataset,
             test_set: Dataset | None = None) -> float:
    """Macro F1 of the server model on the pooled device test shards.

    Under FedPer every device predicts its own test rows with the shared base
    and its own head. With ``test_set`` the global model is scored on that
    held-out set instead.
    """
    if test_set is not None:
        return macro_f1(predict(state.global_params, test_set.features), test_set.labels, test_set.n_classes)
    preds, truth = [], []
    for shard in manifest.shards:
        if len(shard.test_idx) == 0:
            continue
        x = dataset.features[shard.test_idx]
        params = state.device_params(shard.device_id) if state.kind is Kind.FEDPER else state.global_params
        preds.append(predict(params, x))
        truth.append(dataset.labels[shard.test_idx])
    if not preds:
        raise ValueError("no device holds test samples")
    return macro_f1(np.concatenate(preds), np.concatenate(truth), dataset.n_classes)


def model_layers(cfg: ExperimentConfig, dataset: Dataset):
    return mlp(dataset.n_features, cfg.hidden, dataset.n_classes, cfg.dropout)


class Federation:
    """Holds the mutable pieces of a running experiment."""

    def __init__(self, cfg: ExperimentConfig, dataset: Dataset, manifest: PartitionManifest | None = None,
                 test_set: Dataset | None = None, workers: int = 1):
        self.cfg = cfg
        self.dataset = dataset
        self.manifest = manifest or build_partition(dataset, cfg.k, cfg.n_devices, cfg.s, cfg.var, cfg.seed)
        if cfg.eval_on == "global" and test_set is None:
            raise ValueError("eval_on='global' needs a test set")
        self.test_set = test_set if cfg.eval_on == "global" else None
        self.workers = max(1, int(workers))
        self.state = init_aggregator(cfg.aggregator, model_layers(cfg, dataset), cfg.n_devices,
                                     cfg.seed, cfg.local)
        self.last_loss: dict[int, float] = {}
        self.records: list[RoundRecord] = []

    def _train_one(self, state: AggregatorState, device: int, round_no: int):
        rows = self.manifest.shards[device].train_idx
        rng = derive_rng(self.cfg.seed, "local", round_no, device)
        return local_train(state, device, self.dataset.features[rows], self.dataset.labels[rows], rng)

    def run_round(self) -> RoundRecord:
        cfg = self.cfg
        round_no = len(self.records) + 1
        started = time.perf_counter()
        if cfg.selection == "loss_biased":
            selected = select_loss_biased(cfg.n_devices, cfg.active_count, self.last_loss)
        else:
            selected = select_active(cfg.n_devices, cfg.active_count, round_no, cfg.seed)
        state = self.state
        if self.workers > 1 and len(selected) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                updates = list(pool.map(lambda d: self._train_one(state, d, round_no), selected))
        else:
            updates = [self._train_one(state, d, round_no) for d in selected]
        self.state = aggregate(state, updates)
        for u in updates:
            self.last_loss[u.device_id] = u.mean_loss
        f1 = evaluate(self.state, self.manifest, self.dataset, self.test_set)
        record = RoundRecord(round_no, tuple(selected), f1, float(np.mean([u.mean_loss for u in updates])),
                             time.perf_counter() - started)
        self.records.append(record)
        return record


def heterogeneity_of(manifest: PartitionManifest, dataset: Dataset) -> tuple[float, str | None]:
    emd = system_emd(manifest.shards, dataset.labels, dataset.n_classes) if manifest.n_devices > 1 else 0.0
    try:
        level = classify_iid(emd, dataset.n_classes).value
    except ValueError:
        level = None
    return emd, level


def run_experiment(cfg: ExperimentConfig, dataset: Dataset, test_set: Dataset | None = None,
                   workers: int = 1, on_round: Callable[[RoundRecord], None] | None = None) -> ExperimentResult:
    fed = Federation(cfg, dataset, test_set=test_set, workers=workers)
    emd, level = heterogeneity_of(fed.manifest, dataset)
    fed.manifest.emd = emd
    for _ in range(cfg.rounds):
        record = fed.run_round()
        if on_round is not None:
            on_round(record)
    return ExperimentResult(cfg, fed.manifest, fed.records, emd, level, fed.state)
