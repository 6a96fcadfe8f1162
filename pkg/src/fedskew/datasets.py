"""Dataset loading (MNIST IDX, tabular CSV), a synthetic tabular stand-in, and
the global train/test split."""

from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedskew._rng import derive_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""
    label_names: tuple[str, ...] = ()
    # bookkeeping for splits: original row of each sample
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(x)):
            raise ValueError("dataset contains non-finite features")
        index = np.arange(len(y)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        for arr in (x, y, index):
            arr.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.features[rows], self.labels[rows], self.n_classes, self.name,
                       self.label_names, self.index[rows])


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    found, count = struct.unpack(">II", data[:8])
    if found != magic:
        raise ValueError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    dims = (count,) + struct.unpack(f">{n_dims - 1}I", data[8:header])
    payload = data[header:]
    if len(payload) != math.prod(dims):
        raise ValueError(f"{path}: expected {math.prod(dims)} bytes of data, found {len(payload)}")
    return dims, payload


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an IDX image/label pair; pixels are flattened and scaled to [0, 1]."""
    img_dims, img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC)
    lab_dims, lab_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if img_dims[0] != lab_dims[0]:
        raise ValueError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    images = np.frombuffer(img_bytes, dtype=np.uint8).reshape(img_dims[0], -1)
    labels = np.frombuffer(lab_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(images / 255.0, labels, 10, name, tuple(str(i) for i in range(10)))


def write_mnist_idx(dataset: Dataset, images_path, labels_path, shape: tuple[int, int] = (28, 28)) -> None:
    """Write features (assumed in [0, 1]) and labels back out as an IDX pair."""
    n = len(dataset)
    if math.prod(shape) != dataset.n_features:
        raise ValueError(f"shape {shape} does not match {dataset.n_features} features")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_tabular_csv(path, label_column: str, name: str | None = None) -> Dataset:
    """Load a headered CSV: one-hot categorical columns, z-score numeric ones.

    A column is numeric when its first value parses as a float; a later
    unparseable value in such a column is an error. Labels are encoded in
    order of first appearance.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise ValueError(f"{path}: no data rows")
    if label_column not in header:
        raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")

    label_at = header.index(label_column)
    label_names: list[str] = []
    codes = {}
    labels = []
    for r in body:
        value = r[label_at]
        if value not in codes:
            codes[value] = len(label_names)
            label_names.append(value)
        labels.append(codes[value])

    columns = []
    for j, col in enumerate(header):
        if j == label_at:
            continue
        raw = [r[j].strip() for r in body]
        if _is_number(raw[0]):
            try:
                values = np.array([float(v) for v in raw])
            except ValueError as exc:
                raise ValueError(f"{path}: non-numeric value in numeric column {col!r}: {exc}") from None
            std = values.std()
            columns.append(((values - values.mean()) / (std if std > 0 else 1.0))[:, None])
        else:
            levels = list(dict.fromkeys(raw))
            onehot = np.zeros((len(raw), len(levels)))
            onehot[np.arange(len(raw)), [levels.index(v) for v in raw]] = 1.0
            columns.append(onehot)
    features = np.hstack(columns) if columns else np.zeros((len(body), 0))
    return Dataset(features, np.array(labels), len(label_names), name or Path(path).stem, tuple(label_names))


def synth_tabular(n_classes: int, n: int, d: int, seed: int, separation: float = 5.0) -> Dataset:
    """Class-balanced Gaussian blobs with unit covariance.

    Class means are the vertices of a centred regular simplex with edge
    ``separation * sqrt(2)``, embedded in the first ``n_classes - 1``
    coordinates, which keeps the classes linearly separable with high
    probability.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n < 10 * n_classes:
        raise ValueError(f"need n >= {10 * n_classes} samples for {n_classes} classes")
    if d < n_classes - 1:
        raise ValueError(f"d must be at least n_classes - 1 = {n_classes - 1}")
    vertices = separation * (np.eye(n_classes) - 1.0 / n_classes)
    # orthonormal basis of the simplex's (K-1)-dim span
    basis, _ = np.linalg.qr(np.eye(n_classes) - 1.0 / n_classes)
    means = np.zeros((n_classes, d))
    means[:, :n_classes - 1] = vertices @ basis[:, :n_classes - 1]

    rng = derive_rng(seed, "synth_tabular")
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    labels = rng.permutation(np.repeat(np.arange(n_classes), counts))
    features = means[labels] + rng.standard_normal((n, d))
    return Dataset(features, labels, n_classes, f"synth{n_classes}",
                   tuple(f"class{i}" for i in range(n_classes)))


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quotas).astype(np.int64)
    short = total - base.sum()
    if short > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    return base


def split_indices(labels: np.ndarray, test_fraction: float, seed: int):
    """Row indices ``(train, test, stratified)`` for a seeded split.

    The test size is ``round(n * test_fraction)`` and per-class test counts are
    apportioned by largest remainder. Stratification is abandoned (with a
    warning) when some class has fewer than two samples.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    labels = np.asarray(labels)
    n = len(labels)
    n_test = int(round(n * test_fraction))
    rng = derive_rng(seed, "global_split")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 2:
        warnings.warn("a class has fewer than 2 samples; falling back to an unstratified split",
                      RuntimeWarning, stacklevel=2)
        perm = rng.permutation(n)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test]), False

    per_class = _largest_remainder(counts * (n_test / n), n_test)
    train, test = [], []
    for cls, k in zip(classes, per_class):
        rows = rng.permutation(np.flatnonzero(labels == cls))
        test.append(rows[:k])
        train.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), True


def global_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train, test, _ = split_indices(dataset.labels, test_fraction, seed)
    return dataset.subset(train), dataset.subset(test)


def find_mnist(directory) -> tuple[Dataset, Dataset]:
    """Load the official train and test IDX files from one directory."""
    directory = Path(directory)
    train = load_mnist_idx(directory / "train-images-idx3-ubyte", directory / "train-labels-idx1-ubyte")
    test = load_mnist_idx(directory / "t10k-images-idx3-ubyte", directory / "t10k-labels-idx1-ubyte")
    return train, test
