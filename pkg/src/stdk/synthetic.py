"""Synthetic stations, fields and fixtures for tests and demos."""
from __future__ import annotations

import datetime as dt
from pathlib import Path

import numpy as np

from .basis import WaterMask, write_water_mask
from .forecast import build_sequences
from .ingest import StationSeries, write_station_csv


def smooth_field(u, v, t):
    return np.sin(2 * np.pi * u) * np.cos(2 * np.pi * v) * np.sin(2 * np.pi * t)


def station_field_sample(n_stations=200, n_steps=50, noise=0.1, seed=0):
    """Random stations in the unit square observed at ``n_steps`` equally spaced times.

    Returns ``(station_index, u, v, t, y)`` flat arrays of length
    ``n_stations * n_steps``.
    """
    rng = np.random.default_rng(seed)
    uv = rng.uniform(size=(n_stations, 2))
    times = np.linspace(0.0, 1.0, n_steps)
    sid = np.repeat(np.arange(n_stations), n_steps)
    u, v = uv[sid, 0], uv[sid, 1]
    t = np.tile(times, n_stations)
    y = smooth_field(u, v, t) + rng.normal(0.0, noise, size=u.size)
    return sid, u, v, t, y


def advection_frames(n_frames=6, size=16, velocity=(1.0, 0.5), width=2.5, origin=None, rng=None):
    """A Gaussian blob translating by ``velocity`` cells per step."""
    rng = rng or np.random.default_rng(0)
    if origin is None:
        origin = rng.uniform(3, size - 6, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    frames = []
    for k in range(n_frames):
        cx = origin[0] + velocity[0] * k
        cy = origin[1] + velocity[1] * k
        frames.append(np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2)))
    return frames


def advection_samples(n_sequences=10, size=16, seed=0, max_speed=0.5):
    """One (3 inputs -> step 6) sample per independently placed blob."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_sequences):
        velocity = rng.uniform(-max_speed, max_speed, size=2)
        origin = rng.uniform(5, size - 5, size=2)
        samples += build_sequences(advection_frames(6, size, velocity, origin=origin, rng=rng))
    return samples


def write_fixture(directory, n_stations=20, n_days=30, nx=8, ny=8, seed=0, bbox=(5.0, 15.0, 45.0, 55.0)):
    """Write stations.csv, grid.txt, mask.txt and config.toml for a small end-to-end run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lon_min, lon_max, lat_min, lat_max = bbox
    start = dt.date(2023, 11, 1)
    stations = []
    for k in range(n_stations):
        u, v = rng.uniform(size=2)
        t = np.linspace(0.0, 1.0, n_days)
        signal = 3.0 + 2.0 * smooth_field(u, v, t) + rng.gamma(0.8, 1.0, size=n_days)
        values = np.round(np.clip(signal, 0.0, None), 2)
        values[rng.uniform(size=n_days) < 0.05] = np.nan
        lon = round(lon_min + u * (lon_max - lon_min), 4)
        lat = round(lat_min + v * (lat_max - lat_min), 4)
        stations.append(StationSeries(f"S{k:03d}", lon, lat, start, values))
    write_station_csv(directory / "stations.csv", stations)

    (directory / "grid.txt").write_text(
        f"lon_min={lon_min}\nlon_max={lon_max}\nlat_min={lat_min}\nlat_max={lat_max}\n"
        f"nx={nx}\nny={ny}\ntimes=0:{n_days}\n"
    )
    water = np.zeros((4, 4), dtype=bool)
    water[0, 3] = True
    write_water_mask(directory / "mask.txt", WaterMask(water, bbox))

    (directory / "config.toml").write_text(
        f"""seed = {seed}

[paths]
stations = "stations.csv"
grid = "grid.txt"
water_mask = "mask.txt"
out = "out"

[ingest]
window = 10

[basis]
spatial_sides = [3, 5]
temporal_counts = [5, 10]

[interp]
hidden_layout = [32, 32, 16]
epochs = 30
batch_size = 64
lr = 0.003

[forecast]
hidden_channels = 4
epochs = 20
batch_size = 8
lr = 0.01
"""
    )
    return directory
