"""Run-spec files: strict YAML (or JSON) documents describing one run."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from fedskew.aggregators import LocalConfig
from fedskew.datasets import Dataset, find_mnist, global_split, load_tabular_csv, synth_tabular
from fedskew.federation import ExperimentConfig


class ConfigError(ValueError):
    """The run spec is malformed or refers to unusable inputs."""


_SECTIONS = {
    "": {"dataset", "experiment", "sweep", "seed", "out"},
    "dataset": {"name", "mnist_dir", "csv_path", "label_column", "test_fraction", "n_classes", "n", "d"},
    "experiment": {"aggregator", "n_devices", "active_count", "rounds", "k", "s", "var", "hidden", "dropout",
                   "selection", "eval_on", "local"},
    "experiment.local": {"epochs", "batch_size", "lr", "mu", "global_lr", "personal_tags"},
    "sweep": {"ks", "vars", "trials"},
}


def _check_keys(doc, section: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section or '<root>'!r} must be a mapping")
    unknown = set(doc) - _SECTIONS[section]
    if unknown:
        raise ConfigError(f"unknown field(s) in {section or '<root>'}: {sorted(unknown)}")
    return doc


@dataclass
class RunSpec:
    dataset: dict
    experiment: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    @classmethod
    def from_dict(cls, doc) -> "RunSpec":
        doc = _check_keys(doc, "")
        if "dataset" not in doc:
            raise ConfigError("missing required section 'dataset'")
        dataset = _check_keys(doc["dataset"], "dataset")
        if "name" not in dataset:
            raise ConfigError("dataset.name is required")
        experiment = _check_keys(doc.get("experiment"), "experiment")
        _check_keys(experiment.get("local"), "experiment.local")
        sweep = _check_keys(doc.get("sweep"), "sweep")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        return cls(dict(dataset), dict(experiment), dict(sweep), seed, doc.get("out"))

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "experiment": self.experiment, "sweep": self.sweep,
                "seed": self.seed, "out": self.out}

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("out")
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    def experiment_config(self) -> ExperimentConfig:
        exp = dict(self.experiment)
        local = LocalConfig(**exp.pop("local", {}))
        try:
            return ExperimentConfig(dataset=self.dataset["name"], local=local, seed=self.seed, **exp)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment section: {exc}") from None

    def load_data(self) -> tuple[Dataset, Dataset | None]:
        """Training set (to be partitioned) and held-out test set."""
        ds = self.dataset
        name = ds["name"]
        try:
            if name == "mnist":
                if not ds.get("mnist_dir"):
                    raise ConfigError("dataset.mnist_dir is required for mnist")
                directory = Path(os.path.expandvars(str(ds["mnist_dir"])))
                if not directory.is_dir():
                    raise ConfigError(f"MNIST directory not found: {directory}")
                return find_mnist(directory)
            if name == "csv":
                if not ds.get("csv_path") or not ds.get("label_column"):
                    raise ConfigError("dataset.csv_path and dataset.label_column are required for csv")
                full = load_tabular_csv(os.path.expandvars(str(ds["csv_path"])), ds["label_column"])
            elif name == "synth":
                full = synth_tabular(ds.get("n_classes", 7), ds.get("n", 2100), ds.get("d", 16), self.seed)
            else:
                raise ConfigError(f"unknown dataset {name!r}; use mnist, csv or synth")
        except (OSError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"cannot load dataset: {exc}") from None
        return global_split(full, ds.get("test_fraction", 0.2), self.seed)


PRESET_PREFIX = "preset:"


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("fedskew.presets").iterdir() if p.name.endswith(".yaml"))


def load_spec(path: str) -> RunSpec:
    try:
        if path.startswith(PRESET_PREFIX):
            name = path[len(PRESET_PREFIX):]
            if name not in preset_names():
                raise ConfigError(f"unknown preset {name!r}; have {preset_names()}")
            text = resources.files("fedskew.presets").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        doc = yaml.safe_load(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return RunSpec.from_dict(doc)
