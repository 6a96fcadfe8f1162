"""Small feed-forward classifier on a flat parameter vector.

Every dense layer owns one contiguous segment of the vector (weights in
row-major ``(in_dim, out_dim)`` order followed by the bias). The last dense
layer is tagged ``"head"``; the others are ``"dense0"``, ``"dense1"``, ...
Aggregators work directly on :attr:`ParamVector.values` and use the segment
table to split base layers from the personalised head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedskew._rng import derive_rng

HEAD = "head"
LAYER_KINDS = ("dense", "relu", "dropout", "softmax-output")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dimensions must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind} layer must preserve its width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim if self.kind == "dense" else 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec("relu", dim, dim)


def dropout(dim: int, rate: float) -> LayerSpec:
    return LayerSpec("dropout", dim, dim, rate)


def softmax_output(n_classes: int) -> LayerSpec:
    return LayerSpec("softmax-output", n_classes, n_classes)


def mlp(in_dim: int, hidden: Sequence[int], n_classes: int, dropout_rate: float = 0.0) -> tuple[LayerSpec, ...]:
    """Dense/ReLU(/dropout) stack ending in a softmax over ``n_classes``."""
    layers: list[LayerSpec] = []
    width = in_dim
    for h in hidden:
        layers += [dense(width, h), relu(h)]
        if dropout_rate > 0:
            layers.append(dropout(h, dropout_rate))
        width = h
    layers += [dense(width, n_classes), softmax_output(n_classes)]
    return tuple(layers)


def check_spec(layers: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    """Validate a layer list and return it with the softmax output made explicit.

    A list ending in a dense layer is accepted; the softmax over its outputs is
    implied.
    """
    layers = tuple(layers)
    if not layers:
        raise ValueError("empty layer spec")
    if layers[-1].kind == "dense":
        layers = layers + (softmax_output(layers[-1].out_dim),)
    for prev, nxt in zip(layers, layers[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ValueError(f"dimension mismatch: {prev.kind}({prev.out_dim}) feeds {nxt.kind}({nxt.in_dim})")
    if any(layer.kind == "softmax-output" for layer in layers[:-1]):
        raise ValueError("softmax-output may only appear as the final layer")
    if layers[-1].kind != "softmax-output":
        raise ValueError("final layer must be softmax-output")
    if not any(layer.kind == "dense" for layer in layers):
        raise ValueError("spec has no dense layer")
    return layers


def _segment_table(layers: tuple[LayerSpec, ...]) -> tuple[tuple[str, int, int], ...]:
    dense_layers = [layer for layer in layers if layer.kind == "dense"]
    table = []
    offset = 0
    for i, layer in enumerate(dense_layers):
        tag = HEAD if i == len(dense_layers) - 1 else f"dense{i}"
        table.append((tag, offset, layer.n_params))
        offset += layer.n_params
    return tuple(table)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameters plus the layer spec that gives them meaning."""

    values: np.ndarray
    layers: tuple[LayerSpec, ...]
    segments: tuple[tuple[str, int, int], ...] = field(init=False)

    def __post_init__(self):
        layers = check_spec(self.layers)
        values = np.array(self.values, dtype=np.float64)
        table = _segment_table(layers)
        total = sum(length for _, _, length in table)
        if values.shape != (total,):
            raise ValueError(f"expected {total} parameters, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "segments", table)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(tag for tag, _, _ in self.segments)

    def same_layout(self, other: "ParamVector") -> bool:
        if self.layers is other.layers:
            return True
        return self.segments == other.segments and self.layers == other.layers

    def check_layout(self, other: "ParamVector") -> None:
        if not self.same_layout(other):
            raise ValueError("parameter layouts differ")

    def with_values(self, values: np.ndarray, copy: bool = True) -> "ParamVector":
        """Same layout, new values. ``copy=False`` adopts (and freezes) a float64 array."""
        if copy:
            return ParamVector(values, self.layers)
        if values.dtype != np.float64 or values.shape != self.values.shape:
            raise ValueError(f"expected float64 array of shape {self.values.shape}")
        values.setflags(write=False)
        out = object.__new__(ParamVector)
        object.__setattr__(out, "values", values)
        object.__setattr__(out, "layers", self.layers)
        object.__setattr__(out, "segments", self.segments)
        return out

    def slice(self, tag: str) -> slice:
        for t, offset, length in self.segments:
            if t == tag:
                return slice(offset, offset + length)
        raise KeyError(f"unknown segment tag {tag!r}; have {self.tags}")

    def mask(self, tags) -> np.ndarray:
        """Boolean mask over the vector selecting the given segments."""
        out = np.zeros(len(self), dtype=bool)
        for tag in tags:
            out[self.slice(tag)] = True
        return out


def segment(params: ParamVector, tag: str) -> np.ndarray:
    """Read-only view of one segment."""
    return params.values[params.slice(tag)]


def replace_segment(params: ParamVector, tag: str, values) -> ParamVector:
    sl = params.slice(tag)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (sl.stop - sl.start,):
        raise ValueError(f"segment {tag!r} holds {sl.stop - sl.start} values, got shape {values.shape}")
    new = params.values.copy()
    new[sl] = values
    return params.with_values(new)


def init_model(layers: Sequence[LayerSpec], seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layers = check_spec(layers)
    rng = derive_rng(seed, "init")
    chunks = []
    for layer in layers:
        if layer.kind != "dense":
            continue
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        chunks.append(rng.uniform(-bound, bound, size=layer.in_dim * layer.out_dim))
        chunks.append(np.zeros(layer.out_dim))
    return ParamVector(np.concatenate(chunks), layers)


@dataclass(frozen=True, eq=False)
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"features must be a non-empty 2-d array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must be one per row of features")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integer class indices")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64, copy=False))


def _unpack(params: ParamVector):
    """Yield (W, b) views for the dense layers in order."""
    out = []
    dense_layers = [layer for layer in params.layers if layer.kind == "dense"]
    for layer, (_, offset, _) in zip(dense_layers, params.segments):
        n_w = layer.in_dim * layer.out_dim
        w = params.values[offset:offset + n_w].reshape(layer.in_dim, layer.out_dim)
        b = params.values[offset + n_w:offset + n_w + layer.out_dim]
        out.append((w, b))
    return out


def _forward(params: ParamVector, x: np.ndarray, train: bool, rng: np.random.Generator | None):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in features")
    if x.shape[1] != params.layers[0].in_dim:
        raise ValueError(f"model expects {params.layers[0].in_dim} features, got {x.shape[1]}")
    weights = iter(_unpack(params))
    cache = []
    h = x
    for layer in params.layers:
        if layer.kind == "dense":
            w, b = next(weights)
            cache.append(h)
            h = h @ w + b
        elif layer.kind == "relu":
            cache.append(h > 0)
            h = np.where(h > 0, h, 0.0)
        elif layer.kind == "dropout":
            if train and layer.dropout_rate > 0:
                if rng is None:
                    raise ValueError("train mode with dropout needs a random stream")
                keep = (rng.random(h.shape) >= layer.dropout_rate) / (1.0 - layer.dropout_rate)
            else:
                keep = None
            cache.append(keep)
            if keep is not None:
                h = h * keep
        else:  # softmax-output
            cache.append(None)
    return h, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(params: ParamVector, batch: Batch, mode: str = "eval",
                  dropout_rng: np.random.Generator | None = None):
    """Mean softmax cross-entropy, its gradient, and the argmax predictions."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n_classes = params.layers[-1].out_dim
    if batch.labels.min() < 0 or batch.labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    logits, cache = _forward(params, batch.features, mode == "train", dropout_rng)
    logp = _log_softmax(logits)
    n = batch.features.shape[0]
    rows = np.arange(n)
    loss = float(-logp[rows, batch.labels].mean())

    delta = np.exp(logp)
    delta[rows, batch.labels] -= 1.0
    delta /= n

    weights = _unpack(params)
    flat = np.empty(len(params))
    wi = len(weights)
    for layer, saved in zip(reversed(params.layers), reversed(cache)):
        if layer.kind == "dense":
            wi -= 1
            w, _ = weights[wi]
            _, offset, length = params.segments[wi]
            n_w = w.size
            np.matmul(saved.T, delta, out=flat[offset:offset + n_w].reshape(w.shape))
            flat[offset + n_w:offset + length] = delta.sum(axis=0)
            if wi > 0:
                delta = delta @ w.T
        elif layer.kind == "relu":
            delta = delta * saved
        elif layer.kind == "dropout" and saved is not None:
            delta = delta * saved
    return loss, params.with_values(flat, copy=False), logits.argmax(axis=1)


def predict(params: ParamVector, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Eval-mode class predictions, computed in chunks to bound memory."""
    x = np.asarray(features, dtype=np.float64)
    out = [_forward(params, x[i:i + chunk], False, None)[0].argmax(axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float, extra: ParamVector | None = None) -> ParamVector:
    """``params - lr * (grad + extra)``."""
    params.check_layout(grad)
    new = grad.values * -lr
    if extra is not None:
        params.check_layout(extra)
        new -= lr * extra.values
    new += params.values
    return params.with_values(new, copy=False)
