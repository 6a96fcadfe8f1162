"""FedAvg, FedProx, FedPer and SCAFFOLD over flat parameter vectors.

``local_train`` is pure: it reads the server state and returns a
:class:`ClientUpdate`. All persistent per-client state (SCAFFOLD control
variates, FedPer heads) is written only by ``aggregate``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedskew.nn import HEAD, Batch, ParamVector, init_model, loss_and_grad, sgd_step


class Kind(str, enum.Enum):
    FEDAVG = "FedAvg"
    FEDPROX = "FedProx"
    FEDPER = "FedPer"
    SCAFFOLD = "SCAFFOLD"

    @classmethod
    def parse(cls, value) -> "Kind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown aggregator {value!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class LocalConfig:
    epochs: int = 1
    batch_size: int = 10
    lr: float = 0.01
    mu: float = 0.001
    personal_tags: tuple[str, ...] = (HEAD,)
    global_lr: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.lr <= 0 or self.global_lr <= 0 or self.mu < 0:
            raise ValueError("lr and global_lr must be positive and mu non-negative")
        object.__setattr__(self, "personal_tags", tuple(self.personal_tags))


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    device_id: int
    params_after: ParamVector
    n_train: int
    local_steps: int
    mean_loss: float
    control_delta: ParamVector | None = None
    control_after: ParamVector | None = None


@dataclass(eq=False)
class AggregatorState:
    kind: Kind
    global_params: ParamVector
    n_devices: int
    cfg: LocalConfig
    server_control: ParamVector | None = None
    client_controls: dict[int, ParamVector] = field(default_factory=dict)
    client_heads: dict[int, np.ndarray] = field(default_factory=dict)

    def personal_mask(self) -> np.ndarray:
        return self.global_params.mask(self.cfg.personal_tags)

    def device_params(self, device_id: int) -> ParamVector:
        """The model a device starts from: the global one, with its own head under FedPer."""
        if self.kind is not Kind.FEDPER:
            return self.global_params
        values = self.global_params.values.copy()
        mask = self.personal_mask()
        values[mask] = self.client_heads[device_id]
        return self.global_params.with_values(values)


def init_aggregator(kind, layers, n_devices: int, seed: int, cfg: LocalConfig) -> AggregatorState:
    kind = Kind.parse(kind)
    params = init_model(layers, seed)
    state = AggregatorState(kind, params, n_devices, cfg)
    if kind is Kind.SCAFFOLD:
        zero = params.with_values(np.zeros(len(params)))
        state.server_control = zero
        state.client_controls = {d: zero for d in range(n_devices)}
    elif kind is Kind.FEDPER:
        unknown = set(cfg.personal_tags) - set(params.tags)
        if unknown:
            raise ValueError(f"personal tags {sorted(unknown)} are not segments of the model")
        head = params.values[state.personal_mask()].copy()
        state.client_heads = {d: head.copy() for d in range(n_devices)}
    return state


def local_train(state: AggregatorState, device_id: int, features: np.ndarray, labels: np.ndarray,
                rng: np.random.Generator) -> ClientUpdate:
    """Shuffled mini-batch SGD from the server model on one device's train rows."""
    n = len(labels)
    if n == 0:
        raise ValueError(f"device {device_id} has no training samples")
    cfg = state.cfg
    start = state.device_params(device_id)
    w = start
    correction = None
    if state.kind is Kind.SCAFFOLD:
        c_i = state.client_controls[device_id]
        start.check_layout(c_i)
        correction = start.with_values(state.server_control.values - c_i.values, copy=False)

    steps = 0
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            rows = order[lo:lo + cfg.batch_size]
            loss, grad, _ = loss_and_grad(w, Batch(features[rows], labels[rows]), "train", rng)
            extra = correction
            if state.kind is Kind.FEDPROX and cfg.mu > 0:
                extra = w.with_values(cfg.mu * (w.values - start.values), copy=False)
            w = sgd_step(w, grad, cfg.lr, extra)
            losses.append(loss)
            steps += 1

    if state.kind is Kind.SCAFFOLD:
        c, c_i = state.server_control.values, state.client_controls[device_id].values
        c_new = c_i - c + (start.values - w.values) / (steps * cfg.lr)
        return ClientUpdate(device_id, w, n, steps, float(np.mean(losses)),
                            w.with_values(c_new - c_i), w.with_values(c_new))
    return ClientUpdate(device_id, w, n, steps, float(np.mean(losses)))


def aggregation_weights(updates) -> np.ndarray:
    n = np.array([u.n_train for u in updates], dtype=np.float64)
    return n / n.sum()


def _weighted_mean(updates) -> np.ndarray:
    # sort by device id so the sum does not depend on arrival order
    ordered = sorted(updates, key=lambda u: u.device_id)
    weights = aggregation_weights(ordered)
    return np.einsum("k,kp->p", weights, np.stack([u.params_after.values for u in ordered]))


def aggregate(state: AggregatorState, updates) -> AggregatorState:
    """Fold a round's client updates into a new server state."""
    updates = list(updates)
    if not updates:
        raise ValueError("no client updates to aggregate")
    ids = [u.device_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate device ids in one round")
    for u in updates:
        state.global_params.check_layout(u.params_after)
        if u.n_train < 1:
            raise ValueError(f"device {u.device_id} reports no training samples")

    kind = state.kind
    g = state.global_params
    if kind in (Kind.FEDAVG, Kind.FEDPROX):
        return replace(state, global_params=g.with_values(_weighted_mean(updates)))

    if kind is Kind.FEDPER:
        mask = state.personal_mask()
        values = _weighted_mean(updates)
        values[mask] = g.values[mask]
        heads = dict(state.client_heads)
        for u in updates:
            heads[u.device_id] = u.params_after.values[mask].copy()
        return replace(state, global_params=g.with_values(values), client_heads=heads)

    ordered = sorted(updates, key=lambda u: u.device_id)
    drift = np.mean(np.stack([u.params_after.values - g.values for u in ordered]), axis=0)
    new_global = g.with_values(g.values + state.cfg.global_lr * drift)
    deltas = np.stack([u.control_delta.values for u in ordered])
    c = state.server_control
    new_c = c.with_values(c.values + (len(ordered) / state.n_devices) * deltas.mean(axis=0))
    controls = dict(state.client_controls)
    for u in ordered:
        controls[u.device_id] = u.control_after
    return replace(state, global_params=new_global, server_control=new_c, client_controls=controls)


def local_steps(n_train: int, cfg: LocalConfig) -> int:
    """Number of SGD steps ``local_train`` takes (the short last batch counts)."""
    return math.ceil(n_train / cfg.batch_size) * cfg.epochs
