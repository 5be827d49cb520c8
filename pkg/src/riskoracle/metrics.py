"""Hit-rate accuracies, the two error measures and forecast exports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .grid import UrbanGrid
from .multitask import Forecast

HIGH_FREQUENCY_HOURS = ((7, 9), (12, 16))


def top_m(risk, M: int) -> np.ndarray:
    """Ids of the ``M`` highest risks, ties to the smaller id."""
    risk = np.asarray(risk)
    if M < 1:
        raise ValueError("M must be at least 1")
    ids = np.arange(risk.size)
    return np.lexsort((ids, -risk))[:M]


def hit_rate(chosen, actual) -> float | None:
    """Percent of ``actual`` covered by ``chosen``; None when ``actual`` is empty."""
    actual = set(int(a) for a in actual)
    if not actual:
        return None
    return 100.0 * len(actual.intersection(int(c) for c in chosen)) / len(actual)


def _mean(rates) -> float:
    vals = [r for r in rates if r is not None]
    return float(np.mean(vals)) if vals else float("nan")


def acc_at_m(pred, actual, M: int, per_interval: bool = False):
    """Mean hit rate of the top-M cells over intervals with at least one accident.

    ``pred`` is one risk vector or a sequence of them; ``actual`` the matching
    accident cell set(s).
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim == 1:
        pred, actual = pred[None], [actual]
    rates = [hit_rate(top_m(p, M), a) for p, a in zip(pred, actual)]
    return (_mean(rates), rates) if per_interval else _mean(rates)


def acc_at_k(forecasts, actual, per_interval: bool = False):
    """Mean hit rate of each forecast's selected set; K = 0 intervals are skipped."""
    if isinstance(forecasts, Forecast):
        forecasts, actual = [forecasts], [actual]
    rates = [None if f.K == 0 else hit_rate(f.selected, a) for f, a in zip(forecasts, actual)]
    return (_mean(rates), rates) if per_interval else _mean(rates)


def high_frequency_mask(interval_of_day, interval_seconds: int, hours=HIGH_FREQUENCY_HOURS) -> np.ndarray:
    """True where the interval starts inside one of the half-open hour ranges."""
    start_h = np.asarray(interval_of_day) * interval_seconds / 3600.0
    mask = np.zeros(start_h.shape, dtype=bool)
    for lo, hi in hours:
        mask |= (start_h >= lo) & (start_h < hi)
    return mask


def acc1(rates, interval_of_day, interval_seconds: int, hours=HIGH_FREQUENCY_HOURS) -> float:
    """Average per-interval rates restricted to the high-frequency hours."""
    keep = high_frequency_mask(interval_of_day, interval_seconds, hours)
    return _mean([r for r, k in zip(rates, keep) if k])


def mse_transformed(pred, labels) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(labels)) ** 2))


def mse_raw(pred, raw) -> float:
    """Error against raw risk with negative predictions read as zero."""
    return float(np.mean((np.clip(np.asarray(pred), 0.0, None) - np.asarray(raw)) ** 2))


def actual_cells(accidents) -> list:
    return [np.flatnonzero(row > 0) for row in np.atleast_2d(accidents)]


# --- exports ---------------------------------------------------------------

def _open_for_write(path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export_heatmap(forecast: Forecast, grid: UrbanGrid, path) -> dict:
    """Write ``<path>.csv`` (grid of risks), ``<path>.pgm`` and ``<path>_selected.csv``.

    Row 0 of the CSV and image is grid row 0. Returns the written paths.
    """
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".csv", ".pgm") else base
    risk = np.asarray(forecast.risk, dtype=np.float64).reshape(grid.rows, grid.cols)
    paths = {"csv": base.with_suffix(".csv"), "pgm": base.with_suffix(".pgm"),
             "selected": base.parent / (base.name + "_selected.csv")}
    with _open_for_write(paths["csv"]) as fh:
        w = csv.writer(fh)
        for row in risk:
            w.writerow([repr(float(v)) for v in row])
    lo, hi = float(risk.min()), float(risk.max())
    gray = np.full(risk.shape, 128, dtype=np.int64) if hi == lo else \
        np.round(255 * (risk - lo) / (hi - lo)).astype(np.int64)
    with _open_for_write(paths["pgm"]) as fh:
        fh.write(f"P2\n{grid.cols} {grid.rows}\n255\n")
        for row in gray:
            fh.write(" ".join(str(v) for v in row) + "\n")
    with _open_for_write(paths["selected"]) as fh:
        w = csv.writer(fh)
        w.writerow(["subregion_id", "row", "col", "risk"])
        for i in forecast.selected:
            r, c = divmod(int(i), grid.cols)
            w.writerow([int(i), r, c, repr(float(forecast.risk[i]))])
    return paths


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise DataError(f"{path}: not an ASCII graymap")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + rows * cols], dtype=np.int64).reshape(rows, cols)


def write_forecasts(path, forecasts) -> None:
    with _open_for_write(Path(path)) as fh:
        for f in forecasts:
            fh.write(json.dumps(f.to_json(), sort_keys=True) + "\n")


def read_forecasts(path, grid: UrbanGrid | None = None) -> list:
    with open(path) as fh:
        return [Forecast.from_json(json.loads(line), grid) for line in fh if line.strip()]


def write_metrics(path, report: dict) -> None:
    with _open_for_write(Path(path)) as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=2) + "\n")
