"""Interval frames, risk labels, zero-label enhancement and temporal sampling.

File formats (all CSV files carry a header row):

* ``events.csv``   timestamp,subregion_id,severity
* ``volumes.csv``  interval,subregion_id,value   (absent rows are missing)
* ``speeds.csv``   interval,subregion_id,value
* ``weather.csv``  interval,condition_code,temperature_c
* ``manifest.json`` lists the files, ``interval_seconds``, ``start`` and
  ``n_intervals``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IndicatorError, SamplingError, SplitError
from .grid import UrbanGrid, load_grid, load_static

log = logging.getLogger(__name__)

SEVERITY_WEIGHTS = {1: 1, 2: 2, 3: 3}
MANIFEST_VERSION = 1
SECONDS_PER_DAY = 86_400


@dataclass
class CityData:
    """Everything the model consumes, indexed by interval then subregion.

    ``volume`` and ``speed`` hold NaN where the matching mask is True.
    ``risk`` is severity weighted, ``accidents`` is the raw event count.
    """

    grid: UrbanGrid
    static: np.ndarray
    static_names: list
    interval_seconds: int
    start: int
    volume: np.ndarray
    speed: np.ndarray
    volume_mask: np.ndarray
    speed_mask: np.ndarray
    risk: np.ndarray
    accidents: np.ndarray
    weather: np.ndarray
    temperature: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return self.risk.shape[0]

    @property
    def day_len(self) -> int:
        return SECONDS_PER_DAY // self.interval_seconds

    def interval_of_day(self, t) -> np.ndarray:
        secs = self.start + np.asarray(t) * self.interval_seconds
        return (secs % SECONDS_PER_DAY) // self.interval_seconds

    def day_of_week(self, t) -> np.ndarray:
        """Monday is 0; the Unix epoch fell on a Thursday."""
        secs = self.start + np.asarray(t) * self.interval_seconds
        return (secs // SECONDS_PER_DAY + 3) % 7

    def rect_counts(self, t=None) -> np.ndarray:
        acc = self.accidents if t is None else self.accidents[t]
        q = self.grid.q
        out = np.zeros(acc.shape[:-1] + (q,))
        for k, members in enumerate(self.grid.rect_members):
            out[..., k] = acc[..., members].sum(axis=-1)
        return out

    @property
    def has_missing(self) -> bool:
        return bool(self.volume_mask.any() or self.speed_mask.any())

    def copy(self) -> "CityData":
        arrays = {k: getattr(self, k).copy() for k in
                  ("volume", "speed", "volume_mask", "speed_mask", "risk", "accidents",
                   "weather", "temperature", "static")}
        return CityData(grid=self.grid, static_names=list(self.static_names),
                        interval_seconds=self.interval_seconds, start=self.start,
                        meta=dict(self.meta), **arrays)

    # npz persistence --------------------------------------------------
    def save(self, path) -> None:
        meta = dict(self.meta, grid=self.grid.to_json(), static_names=self.static_names,
                    interval_seconds=self.interval_seconds, start=self.start)
        np.savez(path, volume=self.volume, speed=self.speed, volume_mask=self.volume_mask,
                 speed_mask=self.speed_mask, risk=self.risk, accidents=self.accidents,
                 weather=self.weather, temperature=self.temperature, static=self.static,
                 meta=np.array(json.dumps(meta, sort_keys=True)))

    @classmethod
    def load(cls, path) -> "CityData":
        from .grid import partition

        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            g = meta.pop("grid")
            grid = partition(g["bbox"], g["cell_meters"], g["rect_rows"], g["rect_cols"])
            return cls(grid=grid, static=z["static"], static_names=meta.pop("static_names"),
                       interval_seconds=meta.pop("interval_seconds"), start=meta.pop("start"),
                       volume=z["volume"], speed=z["speed"], volume_mask=z["volume_mask"],
                       speed_mask=z["speed_mask"], risk=z["risk"], accidents=z["accidents"],
                       weather=z["weather"], temperature=z["temperature"], meta=meta)


# risk aggregation -------------------------------------------------------

@dataclass
class IngestReport:
    total: int = 0
    binned: int = 0
    rejected: int = 0
    reasons: dict = field(default_factory=dict)

    def reject(self, reason: str) -> None:
        self.rejected += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1


def aggregate_risk(events, m: int, interval_seconds: int, n_intervals: int, start: int = 0):
    """Bin ``(timestamp, subregion_id, severity)`` records into interval risks.

    Returns ``(risk, accidents, report)`` where ``risk[t, i]`` is the
    severity-weighted sum and ``accidents[t, i]`` the event count.
    """
    risk = np.zeros((n_intervals, m))
    accidents = np.zeros((n_intervals, m))
    report = IngestReport()
    for ts, cell, sev in events:
        report.total += 1
        if sev not in SEVERITY_WEIGHTS:
            report.reject("severity")
            continue
        t = math.floor((ts - start) / interval_seconds)
        if not 0 <= t < n_intervals:
            report.reject("timestamp")
            continue
        if not 0 <= cell < m:
            report.reject("subregion")
            continue
        risk[t, cell] += SEVERITY_WEIGHTS[sev]
        accidents[t, cell] += 1
        report.binned += 1
    if report.rejected:
        log.warning("rejected %d of %d event records: %s", report.rejected, report.total, report.reasons)
    return risk, accidents, report


def weekly_totals(risk: np.ndarray, day_len: int) -> np.ndarray:
    """Sum interval risks into calendar weeks counted from interval 0."""
    week = 7 * day_len
    n_weeks = -(-risk.shape[0] // week)
    out = np.zeros((n_weeks, risk.shape[1]))
    for w in range(n_weeks):
        out[w] = risk[w * week:(w + 1) * week].sum(axis=0)
    return out


def risk_indicator(weekly) -> np.ndarray:
    """Mean over weeks of each subregion's share of the weekly citywide risk.

    Weeks with zero citywide risk carry no share and are dropped.
    """
    weekly = np.atleast_2d(np.asarray(weekly, dtype=np.float64))
    totals = weekly.sum(axis=1)
    good = totals > 0
    if not good.any():
        raise IndicatorError("every week has zero citywide risk")
    if not good.all():
        log.warning("dropping %d week(s) with zero citywide risk", int((~good).sum()))
    shares = weekly[good] / totals[good, None]
    return shares.mean(axis=0)


@dataclass
class EnhancedLabels:
    """Labels with zeros replaced by the per-subregion intensity ``pi``."""

    values: np.ndarray
    pi: np.ndarray
    b1: float
    b2: float
    eps: np.ndarray

    def apply(self, risk) -> np.ndarray:
        risk = np.asarray(risk, dtype=np.float64)
        return np.where(risk > 0, risk, np.broadcast_to(self.pi, risk.shape))


def floor_indicator(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    pos = eps[eps > 0]
    if pos.size == 0:
        raise IndicatorError("indicator has no positive entry")
    return np.where(eps > 0, eps, 0.5 * pos.min())


def pkde_coefficients(eps, r_min: float, r_max: float) -> tuple:
    """Solve b1, b2 so that pi(eps_max) = -r_min and pi(eps_min) = -r_max.

    Returns ``(b1, b2)``; ``b1`` is None when the anchors coincide.
    """
    e_hi, e_lo = float(np.max(eps)), float(np.min(eps))
    if e_hi == e_lo:
        return None, -(r_min + r_max) / 2.0
    l_hi, l_lo = math.log2(e_hi), math.log2(e_lo)
    b1 = (r_max - r_min) / (l_hi - l_lo)
    b2 = -r_min - b1 * l_hi
    return b1, b2


def pkde_enhance(risk, eps, r_min: float | None = None, r_max: float | None = None) -> EnhancedLabels:
    """Replace zero risks by the negative log-intensity of their subregion.

    ``r_min``/``r_max`` default to the smallest and largest nonzero risk in
    ``risk``; pass the training-split values when enhancing other splits.
    """
    risk = np.asarray(risk, dtype=np.float64)
    eps = floor_indicator(eps)
    if r_min is None or r_max is None:
        nz = risk[risk > 0]
        if nz.size == 0:
            raise IndicatorError("no nonzero risk to anchor the transform")
        r_min, r_max = float(nz.min()), float(nz.max())
    if r_max <= r_min:
        # a single distinct risk value would flatten pi and lose the ranks
        log.warning("all nonzero risks equal %.4g; widening the anchor range by 1", r_min)
        r_max = r_min + 1.0
    b1, b2 = pkde_coefficients(eps, r_min, r_max)
    if b1 is None:
        log.warning("indicator is constant; every zero label becomes %.4g", b2)
        pi = np.full(eps.shape, b2)
        b1 = 0.0
    else:
        pi = b1 * np.log2(eps) + b2
    labels = EnhancedLabels(values=np.empty(0), pi=pi, b1=b1, b2=b2, eps=eps)
    labels.values = labels.apply(risk)
    return labels


# temporal sampling --------------------------------------------------------

@dataclass(frozen=True)
class TemporalIndexSet:
    target: int
    closeness: tuple
    period: tuple
    trend: tuple

    def perspectives(self) -> tuple:
        return self.closeness, self.period, self.trend


TREND_DAYS = 10


def earliest_sample(day_len: int, kappa: int = 3) -> int:
    return max(kappa, kappa * day_len, kappa * TREND_DAYS * day_len)


def temporal_sample(t: int, day_len: int, kappa: int = 3) -> TemporalIndexSet:
    """Look-back indices for hourly closeness, daily period and 10-day trend."""
    earliest = earliest_sample(day_len, kappa)
    if t < earliest:
        raise SamplingError(f"interval {t} lacks history; earliest usable interval is {earliest}",
                            earliest=earliest)
    ks = range(1, kappa + 1)
    return TemporalIndexSet(
        target=t,
        closeness=tuple(t - k for k in ks),
        period=tuple(t - k * day_len for k in ks),
        trend=tuple(t - k * TREND_DAYS * day_len for k in ks),
    )


def split(n: int) -> tuple:
    """Chronological 60/30/10 split of ``n`` items into three ranges."""
    if n < 3:
        raise SplitError(f"need at least 3 intervals to split, got {n}")
    n_train = n * 6 // 10
    n_eval = n * 3 // 10
    if n_train == 0 or n_eval == 0 or n - n_train - n_eval == 0:
        raise SplitError(f"{n} intervals leave an empty split")
    return range(0, n_train), range(n_train, n_train + n_eval), range(n_train + n_eval, n)


# CSV ingestion ---------------------------------------------------------------

def _read_csv(path, expected: list):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataError(f"{path}: header {header} != {expected}")
        yield from reader


def read_events(path):
    for rec in _read_csv(path, ["timestamp", "subregion_id", "severity"]):
        yield float(rec[0]), int(rec[1]), int(rec[2])


def read_readings(path, n_intervals: int, m: int):
    values = np.full((n_intervals, m), np.nan)
    for rec in _read_csv(path, ["interval", "subregion_id", "value"]):
        t, i = int(rec[0]), int(rec[1])
        if 0 <= t < n_intervals and 0 <= i < m:
            values[t, i] = float(rec[2])
    return values, np.isnan(values)


def read_weather(path, n_intervals: int):
    code = np.zeros(n_intervals, dtype=np.int64)
    temp = np.zeros(n_intervals)
    for rec in _read_csv(path, ["interval", "condition_code", "temperature_c"]):
        t = int(rec[0])
        if 0 <= t < n_intervals:
            code[t], temp[t] = int(rec[1]), float(rec[2])
    return code, temp


def write_events(path, events) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "subregion_id", "severity"])
        for ts, cell, sev in events:
            w.writerow([int(ts), int(cell), int(sev)])


def write_readings(path, values, mask) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "subregion_id", "value"])
        for t, i in zip(*np.nonzero(~mask)):
            w.writerow([int(t), int(i), f"{values[t, i]:.4f}"])


def write_weather(path, code, temp) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "condition_code", "temperature_c"])
        for t, (c, x) in enumerate(zip(code, temp)):
            w.writerow([t, int(c), f"{x:.2f}"])


def ingest(manifest_path) -> tuple:
    """Load a dataset manifest and its files into :class:`CityData`."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        man = json.loads(manifest_path.read_text())
        files = man["files"]
        interval_seconds = int(man["interval_seconds"])
        start = int(man["start"])
        n = int(man["n_intervals"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"bad manifest {manifest_path}: {exc}") from exc
    grid = load_grid(root / files["grid"])
    names, S = load_static(root / files["static"], grid.m)
    risk, accidents, report = aggregate_risk(read_events(root / files["events"]), grid.m,
                                             interval_seconds, n, start)
    volume, vmask = read_readings(root / files["volumes"], n, grid.m)
    speed, smask = read_readings(root / files["speeds"], n, grid.m)
    code, temp = read_weather(root / files["weather"], n)
    data = CityData(grid=grid, static=S, static_names=names, interval_seconds=interval_seconds,
                    start=start, volume=volume, speed=speed, volume_mask=vmask, speed_mask=smask,
                    risk=risk, accidents=accidents, weather=code, temperature=temp,
                    meta={"source": str(manifest_path)})
    return data, report


def write_manifest(root, interval_seconds: int, start: int, n_intervals: int, extra=None) -> Path:
    man = {
        "version": MANIFEST_VERSION,
        "files": {"grid": "grid.json", "static": "static.csv", "events": "events.csv",
                  "volumes": "volumes.csv", "speeds": "speeds.csv", "weather": "weather.csv"},
        "interval_seconds": interval_seconds,
        "start": start,
        "n_intervals": n_intervals,
        "span": [start, start + n_intervals * interval_seconds],
    }
    if extra:
        man.update(extra)
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path
