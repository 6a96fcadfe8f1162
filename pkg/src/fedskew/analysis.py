"""Learning-curve post-processing and cross-experiment comparison tables."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

TABLE_HEADER = ["dataset", "iid_level", "param", "param_value", "aggregator", "best_f1", "best_round", "is_best"]


def _as_curve(values) -> np.ndarray:
    curve = np.asarray(values, dtype=np.float64)
    if curve.ndim != 1 or len(curve) == 0:
        raise ValueError("curve must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(curve)):
        raise ValueError("curve contains non-finite values")
    return curve


def outlier_mask(values, sigma_mult: float = 3.0) -> np.ndarray:
    curve = _as_curve(values)
    return np.abs(curve - curve.mean()) > sigma_mult * curve.std()


def remove_outliers(values, sigma_mult: float = 3.0) -> np.ndarray:
    """Backfill points lying more than ``sigma_mult`` population std from the mean.

    Each flagged point takes the value of the nearest retained point before it;
    flagged points at the start take the first retained value. Removing a
    spike shrinks the standard deviation, which can expose new outliers, so
    the pass is repeated until nothing is flagged; this makes the operation
    idempotent.
    """
    curve = _as_curve(values)
    if len(curve) < 3:
        raise ValueError("outlier removal needs at least 3 points")
    out = curve.copy()
    for _ in range(len(curve)):
        flagged = outlier_mask(out, sigma_mult)
        if not flagged.any():
            break
        if flagged.all():
            warnings.warn("every point was flagged as an outlier; curve left unchanged",
                          RuntimeWarning, stacklevel=2)
            return curve.copy()
        kept = np.flatnonzero(~flagged)
        prev = out.copy()
        for i in np.flatnonzero(flagged):
            before = kept[kept < i]
            out[i] = prev[before[-1]] if len(before) else prev[kept[0]]
    return out


def moving_average(values, window: int = 3) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` points average what is available."""
    if window < 1:
        raise ValueError("window must be at least 1")
    curve = _as_curve(values)
    n = len(curve)
    total = np.zeros(n)
    count = np.zeros(n)
    # shifted sums rather than a cumsum, so window=1 returns the curve exactly
    for lag in range(min(window, n)):
        total[lag:] += curve[:n - lag]
        count[lag:] += 1
    return total / count


def best_f1(values) -> tuple[int, float]:
    """``(round, value)`` of the maximum, with the earliest 1-based round on ties."""
    curve = _as_curve(values)
    i = int(np.argmax(curve))
    return i + 1, float(curve[i])


def process_curve(values, sigma_mult: float = 3.0, window: int = 3) -> np.ndarray:
    """Outlier removal followed by smoothing."""
    curve = _as_curve(values)
    if len(curve) >= 3:
        curve = remove_outliers(curve, sigma_mult)
    return moving_average(curve, window)


def round_to_round_std(values) -> float:
    """Standard deviation of consecutive F1 differences (a volatility measure)."""
    curve = _as_curve(values)
    if len(curve) < 2:
        return 0.0
    return float(np.diff(curve).std())


@dataclass(frozen=True)
class TableRow:
    dataset: str
    iid_level: str
    param: str
    param_value: object
    aggregator: str
    best_f1: float
    best_round: int
    is_best: bool = False
    raw_best_f1: float | None = None
    raw_best_round: int | None = None

    def as_list(self, with_raw: bool = False) -> list:
        row = [self.dataset, self.iid_level, self.param, self.param_value, self.aggregator,
               repr(self.best_f1), self.best_round, int(self.is_best)]
        if with_raw:
            row += [repr(self.raw_best_f1), self.raw_best_round]
        return row


AGGREGATOR_ORDER = {"FedAvg": 0, "FedProx": 1, "FedPer": 2, "SCAFFOLD": 3}


def _lookup(config: dict, name: str):
    if name in config:
        return config[name]
    if name in config.get("local", {}):
        return config["local"][name]
    raise KeyError(f"config has no field {name!r}")


def compare_table(results, group_by: str = "active_count", sigma_mult: float | None = None,
                  window: int | None = None) -> list[TableRow]:
    """One row per result, best-in-group flagged.

    ``results`` are experiment summaries (see ``ExperimentResult.summary``) or
    objects with a ``summary()`` method. Rows are grouped by
    ``(dataset, iid_level, param_value)``; ties share the flag. When
    ``sigma_mult``/``window`` are given, ``best_f1`` is taken on the processed
    curve and the raw best is kept alongside.
    """
    docs = [r.summary() if hasattr(r, "summary") else r for r in results]
    if not docs:
        raise ValueError("nothing to compare")
    rows = []
    for doc in docs:
        raw = doc["curve"]
        raw_round, raw_value = best_f1(raw)
        if sigma_mult is not None or window is not None:
            processed = process_curve(raw, 3.0 if sigma_mult is None else sigma_mult, 1 if window is None else window)
            best_round, best_value = best_f1(processed)
        else:
            best_round, best_value = raw_round, raw_value
        cfg = doc["config"]
        rows.append(TableRow(cfg["dataset"], str(doc.get("iid_level")), group_by, _lookup(cfg, group_by),
                             cfg["aggregator"], best_value, best_round, False, raw_value, raw_round))

    def group_key(row):
        return (row.dataset, row.iid_level, row.param, str(row.param_value))

    best = {}
    for row in rows:
        best[group_key(row)] = max(best.get(group_key(row), -np.inf), row.best_f1)
    rows = [TableRow(**{**row.__dict__, "is_best": row.best_f1 == best[group_key(row)]}) for row in rows]
    rows.sort(key=lambda r: (r.dataset, r.iid_level, str(r.param_value),
                             AGGREGATOR_ORDER.get(r.aggregator, 99), r.aggregator, r.best_round))
    return rows


def write_table_csv(rows, path, meta: str | None = None, with_raw: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_HEADER + (["raw_best_f1", "raw_best_round"] if with_raw else []))
        for row in rows:
            writer.writerow(row.as_list(with_raw))
