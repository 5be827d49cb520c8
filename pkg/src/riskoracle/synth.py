"""Synthetic city generator.

Cells get a latent urbanness and land-use mix. Volumes follow a per-cell
diurnal profile (residential cells peak in the morning, business cells in
the evening) damped on weekends; speeds fall with volume. Random congestion
shocks cut the speed of a cell and its grid neighbours for a few intervals
and raise their accident hazard from the following interval on, so a sudden
speed drop precedes the extra accidents. Accidents are Poisson draws from a hazard that grows with volume,
road attributes, shocks and bad weather.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .grid import UrbanGrid, bbox_for, partition, save_grid, save_static

STATIC_NAMES = ["lanes", "highway", "arterial", "collector", "local", "segment_km",
                "width_m", "snow_priority", "overhead_signs"]
SEVERITY_P = (0.7, 0.2, 0.1)
START_2017 = 1_483_315_200  # Monday 2017-01-02 00:00 UTC
MIN_DAYS = 45


@dataclass(frozen=True)
class Scenario:
    name: str = "default"
    accidents_per_interval: float = 6.0
    weather: bool = True
    volume_missing: float = 0.10
    speed_missing: float = 0.20
    shock_prob: float = 0.004
    shock_len: int = 3
    shock_radius: int = 1           # 1 spreads a shock over the 3 x 3 block
    shock_hazard: float = 10.0
    shock_speed_drop: float = 0.55
    linear_speed: bool = False


SCENARIOS = {
    "default": Scenario(),
    "no_accidents": Scenario(name="no_accidents", accidents_per_interval=0.0),
    "clear": Scenario(name="clear", weather=False),
    "complete": Scenario(name="complete", volume_missing=0.0, speed_missing=0.0),
    # speed = 60 - 0.1 * volume + N(0, 1): a known relation for co-sensing checks
    "linear_speed": Scenario(name="linear_speed", linear_speed=True, shock_prob=0.0),
}


def get_scenario(name) -> Scenario:
    if isinstance(name, Scenario):
        return name
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


def _bump(hours, centre, width):
    d = np.minimum(np.abs(hours - centre), 24 - np.abs(hours - centre))
    return np.exp(-0.5 * (d / width) ** 2)


def _block(grid: UrbanGrid, radius: int) -> list:
    """Cells within Chebyshev distance ``radius`` of each cell."""
    r, c = np.divmod(np.arange(grid.m), grid.cols)
    near = (np.abs(r[:, None] - r[None, :]) <= radius) & (np.abs(c[:, None] - c[None, :]) <= radius)
    return [np.flatnonzero(row) for row in near]


def _weather_chain(rng, n, day_len, enabled):
    """Hourly-persistent Markov chain over clear(0)/rain(1)/snow(2)."""
    if not enabled:
        return np.zeros(n, dtype=np.int64)
    hold = max(1, day_len // 24)
    trans = np.array([[0.94, 0.05, 0.01], [0.15, 0.84, 0.01], [0.20, 0.02, 0.78]])
    codes = np.zeros(n, dtype=np.int64)
    state = 0
    for t in range(n):
        if t % hold == 0:
            state = rng.choice(3, p=trans[state])
        codes[t] = state
    return codes


def generate(grid: UrbanGrid, days: int, seed: int, scenario="default",
             interval_minutes: int = 30, start: int = START_2017) -> tuple:
    """Simulate ``days`` days; returns ``(CityData, events, truth)``.

    ``truth`` holds the noise-free hazard and the complete volume/speed
    fields for diagnostics.
    """
    if days < 1:
        raise ValueError("days must be positive")
    sc = get_scenario(scenario)
    rng = np.random.default_rng(seed)
    m = grid.m
    interval_seconds = interval_minutes * 60
    day_len = D.SECONDS_PER_DAY // interval_seconds
    n = days * day_len

    r, c = np.divmod(np.arange(m), grid.cols)
    y, x = (r + 0.5) / grid.rows, (c + 0.5) / grid.cols
    centres = [(0.55, 0.45, 0.22, 1.0), (0.2, 0.8, 0.12, 0.6)]
    urban = np.zeros(m)
    for cy, cx, width, amp in centres:
        urban += amp * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * width ** 2))
    urban = np.clip(urban + 0.05 * rng.random(m), 0, None)
    urban /= urban.max()
    business = np.clip(0.8 * urban + 0.35 * rng.random(m) - 0.1, 0.0, 1.0)

    # static road attributes
    road_mix = rng.dirichlet(np.ones(4), size=m) * 0.5
    road_mix[:, 0] += 0.3 * (rng.random(m) < 0.15)  # scattered highway cells
    road_mix[:, 1] += 0.4 * urban
    road_mix[:, 3] += 0.4 * (1 - urban)
    road_mix /= road_mix.sum(axis=1, keepdims=True)
    lanes = 1.0 + 3.0 * urban + 2.0 * road_mix[:, 0] + 0.3 * rng.random(m)
    seg_km = 2.0 + 8.0 * urban + rng.gamma(2.0, 0.5, m)
    width_m = 6.0 + 10.0 * road_mix[:, 0] + 4.0 * urban + rng.random(m)
    snow = 1.0 + np.round(2 * (road_mix[:, 0] + road_mix[:, 1]))
    signs = rng.poisson(1.0 + 6.0 * urban + 8.0 * road_mix[:, 0]).astype(np.float64)
    static = np.column_stack([lanes, road_mix * 10.0, seg_km, width_m, snow, signs])
    danger = np.exp(1.2 * road_mix[:, 0] + 0.6 * road_mix[:, 1] + 0.04 * signs)

    # traffic
    t_idx = np.arange(n)
    secs = start + t_idx * interval_seconds
    hours = (secs % D.SECONDS_PER_DAY) / 3600.0 + interval_minutes / 120.0
    dow = (secs // D.SECONDS_PER_DAY + 3) % 7
    weekend = dow >= 5
    morning, evening = _bump(hours, 8.0, 1.3), _bump(hours, 17.5, 1.6)
    midday, night = _bump(hours, 13.0, 2.5), _bump(hours, 3.5, 2.5)
    weekday_shape = (0.25 + (1 - business)[None, :] * morning[:, None] * 1.1
                     + business[None, :] * evening[:, None] * 1.1
                     + 0.45 * midday[:, None] - 0.15 * night[:, None])
    weekend_shape = 0.2 + 0.7 * _bump(hours, 13.5, 3.0)[:, None] * (0.6 + 0.4 * business[None, :])
    shape = np.where(weekend[:, None], 0.65 * weekend_shape, weekday_shape)
    capacity = 80.0 + 520.0 * urban
    volume = capacity[None, :] * np.clip(shape, 0.05, None) * (1 + 0.08 * rng.standard_normal((n, m)))
    volume = np.clip(volume, 0.0, None)

    weather = _weather_chain(rng, n, day_len, sc.weather)
    temperature = (2.0 + 4.0 * np.sin(2 * np.pi * (hours - 9) / 24)
                   + 0.05 * t_idx / day_len - 3.0 * (weather == 2) + rng.normal(0, 0.5, n))

    shock = np.zeros((n, m), dtype=bool)
    hazard_boost = np.zeros((n, m), dtype=bool)
    if sc.shock_prob > 0:
        busy = volume / capacity[None, :]
        starts = rng.random((n, m)) < sc.shock_prob * (0.5 + busy)
        reach = _block(grid, sc.shock_radius)
        for t0, i in zip(*np.nonzero(starts)):
            cells = reach[i]
            shock[t0:t0 + sc.shock_len, cells] = True
            hazard_boost[t0 + 1:t0 + 1 + sc.shock_len, cells] = True

    if sc.linear_speed:
        # keep the linear relation's speeds positive
        volume *= 450.0 / volume.max()
        speed = 60.0 - 0.1 * volume + rng.standard_normal((n, m))
    else:
        free = 25.0 + 30.0 * (1 - urban) + 15.0 * road_mix[:, 0]
        speed = free[None, :] * (1 - 0.55 * volume / (1.3 * capacity[None, :]))
        speed = speed * np.where(shock, 1 - sc.shock_speed_drop, 1.0)
        speed = np.clip(speed + 1.5 * rng.standard_normal((n, m)), 2.0, None)

    wx = np.ones(n)
    if sc.weather:
        wx = np.choose(weather, [1.0, 2.2, 2.8])
    raw_hazard = (danger[None, :] * (volume / 300.0) ** 1.3 * wx[:, None]
                  * np.where(hazard_boost, sc.shock_hazard, 1.0))
    scale = sc.accidents_per_interval / raw_hazard.sum(axis=1).mean() if raw_hazard.sum() > 0 else 0.0
    hazard = raw_hazard * scale

    counts = rng.poisson(hazard)
    events = []
    for t, i in zip(*np.nonzero(counts)):
        for _ in range(counts[t, i]):
            ts = start + t * interval_seconds + int(rng.integers(0, interval_seconds))
            sev = int(rng.choice(3, p=SEVERITY_P)) + 1
            events.append((ts, int(i), sev))
    events.sort()

    vmask = rng.random((n, m)) < sc.volume_missing
    smask = rng.random((n, m)) < sc.speed_missing
    risk, accidents, _ = D.aggregate_risk(events, m, interval_seconds, n, start)
    city = D.CityData(
        grid=grid, static=static, static_names=list(STATIC_NAMES),
        interval_seconds=interval_seconds, start=start,
        volume=np.where(vmask, np.nan, np.round(volume, 4)),
        speed=np.where(smask, np.nan, np.round(speed, 4)),
        volume_mask=vmask, speed_mask=smask, risk=risk, accidents=accidents,
        weather=weather, temperature=np.round(temperature, 2),
        meta={"scenario": asdict(sc), "seed": seed, "days": days},
    )
    truth = {"hazard": hazard, "volume": volume, "speed": speed, "shock": shock}
    return city, events, truth


def write_dataset(root, city: D.CityData, events, truth=None) -> Path:
    """Write every file of a dataset directory; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_grid(city.grid, root / "grid.json")
    save_static(root / "static.csv", city.static_names, city.static)
    D.write_events(root / "events.csv", events)
    D.write_readings(root / "volumes.csv", city.volume, city.volume_mask)
    D.write_readings(root / "speeds.csv", city.speed, city.speed_mask)
    D.write_weather(root / "weather.csv", city.weather, city.temperature)
    extra = {"synthetic": city.meta}
    if truth is not None:
        np.savez(root / "truth.npz", **truth)
        extra["truth"] = "truth.npz"
    return D.write_manifest(root, city.interval_seconds, city.start, city.n_intervals, extra)


def desk_grid(rows: int = 12, cols: int = 12, rect_rows: int = 2, rect_cols: int = 2,
              cell_meters: float = 500.0) -> UrbanGrid:
    return partition(bbox_for(rows, cols, cell_meters), cell_meters, rect_rows, rect_cols)


def synth_generate(grid: UrbanGrid, days: int, seed: int, scenario="default",
                   interval_minutes: int = 30, out_dir=None):
    """Generate a dataset and optionally write it to ``out_dir``.

    At least 45 days are required: the trend look-back alone spans 30 days
    and the remainder feeds the three splits.
    """
    if days < MIN_DAYS:
        raise ValueError(f"synthetic datasets need at least {MIN_DAYS} days, got {days}")
    city, events, truth = generate(grid, days, seed, scenario, interval_minutes)
    if out_dir is not None:
        write_dataset(out_dir, city, events, truth)
    return city, events, truth
