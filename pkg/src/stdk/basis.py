"""Multi-resolution basis embeddings for space-time points.

Spatial features are compactly supported Wendland bumps centred on regular
knot lattices over the unit square; temporal features are Gaussian bumps on
equally spaced centres over [0, 1]. A feature row is laid out as all
temporal levels (coarse to fine) followed by all spatial levels (coarse to
fine). ``LAYOUT_VERSION`` is bumped whenever that ordering changes.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, MissingInputError, ParseError

log = logging.getLogger(__name__)

LAYOUT_VERSION = 1
DEFAULT_SPATIAL_SIDES = (9, 17, 35, 73)
DEFAULT_TEMPORAL_COUNTS = (50, 350, 1000)
_UNIT_TOL = 1e-9
_CHUNK_ROWS = 512


@dataclass(frozen=True)
class BasisConfig:
    spatial_sides: tuple[int, ...] = DEFAULT_SPATIAL_SIDES
    temporal_counts: tuple[int, ...] = DEFAULT_TEMPORAL_COUNTS
    support_factor: float = 2.5
    bandwidth_factor: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "spatial_sides", tuple(int(s) for s in self.spatial_sides))
        object.__setattr__(self, "temporal_counts", tuple(int(c) for c in self.temporal_counts))
        if self.support_factor <= 0 or self.bandwidth_factor <= 0:
            raise InvalidArgumentError("support_factor and bandwidth_factor must be positive")

    def canonical(self) -> str:
        return (
            f"layout_version={LAYOUT_VERSION}\n"
            f"spatial_sides={','.join(map(str, self.spatial_sides))}\n"
            f"temporal_counts={','.join(map(str, self.temporal_counts))}\n"
            f"support_factor={self.support_factor!r}\n"
            f"bandwidth_factor={self.bandwidth_factor!r}\n"
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


@dataclass(frozen=True)
class SpatialKnotLevel:
    level_index: int
    grid_side: int
    knots: np.ndarray = field(repr=False)
    support_radius: float

    def __len__(self):
        return len(self.knots)


@dataclass(frozen=True)
class TemporalBasisLevel:
    level_index: int
    centers: np.ndarray = field(repr=False)
    bandwidth: float

    def __len__(self):
        return len(self.centers)


@dataclass(frozen=True)
class WaterMask:
    """Boolean raster, ``True`` = water. Row 0 is the northern edge."""

    water: np.ndarray
    bbox: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        water = np.asarray(self.water, dtype=bool)
        if water.ndim != 2 or water.shape[0] < 1 or water.shape[1] < 1:
            raise InvalidArgumentError(f"water mask must be a non-empty 2-D raster, got shape {water.shape}")
        object.__setattr__(self, "water", water)

    def is_water(self, lon, lat) -> np.ndarray:
        """Look up the cell containing each (lon, lat); edges clamp inwards."""
        rows, cols = self.water.shape
        lon_min, lon_max, lat_min, lat_max = self.bbox
        fx = (np.asarray(lon, dtype=np.float64) - lon_min) / (lon_max - lon_min)
        fy = (lat_max - np.asarray(lat, dtype=np.float64)) / (lat_max - lat_min)
        col = np.clip(np.floor(fx * cols).astype(int), 0, cols - 1)
        row = np.clip(np.floor(fy * rows).astype(int), 0, rows - 1)
        return self.water[row, col]


def read_water_mask(path) -> WaterMask:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"water mask not found: {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty water mask")
    head = lines[0].split()
    if len(head) != 6:
        raise ParseError("header must be 'rows cols lon_min lon_max lat_min lat_max'", line=1)
    try:
        rows, cols = int(head[0]), int(head[1])
        bbox = tuple(float(h) for h in head[2:])
    except ValueError as exc:
        raise ParseError(str(exc), line=1) from None
    body = lines[1:]
    if len(body) != rows:
        raise ParseError(f"expected {rows} mask rows, got {len(body)}")
    water = np.zeros((rows, cols), dtype=bool)
    for r, text in enumerate(body):
        if len(text) != cols or set(text) - {"0", "1"}:
            raise ParseError(f"mask row must be {cols} characters of 0/1", line=r + 2)
        water[r] = [c == "1" for c in text]
    return WaterMask(water, bbox)


def write_water_mask(path, mask: WaterMask) -> None:
    rows, cols = mask.water.shape
    lines = [f"{rows} {cols} " + " ".join(repr(float(b)) for b in mask.bbox)]
    lines += ["".join("1" if w else "0" for w in row) for row in mask.water]
    Path(path).write_text("\n".join(lines) + "\n")


def wendland_kernel(d):
    """C4 Wendland function ``(1 - d)_+^6 (35 d^2 + 18 d + 3) / 3``.

    Accepts a scalar or an array of nonnegative distance ratios.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise InvalidArgumentError("wendland_kernel requires d >= 0")
    one_minus = np.clip(1.0 - d, 0.0, None)
    out = one_minus**6 * (35.0 * d * d + 18.0 * d + 3.0) / 3.0
    return float(out) if out.ndim == 0 else out


def wendland_slope(d):
    """Derivative of :func:`wendland_kernel` with respect to ``d``."""
    d = np.asarray(d, dtype=np.float64)
    one_minus = np.clip(1.0 - d, 0.0, None)
    out = -(56.0 / 3.0) * d * one_minus**5 * (5.0 * d + 1.0)
    return float(out) if out.ndim == 0 else out


def make_spatial_knots(grid_sides: Sequence[int] = DEFAULT_SPATIAL_SIDES, support_factor: float = 2.5):
    levels = []
    for k, side in enumerate(grid_sides):
        if int(side) != side or side < 2:
            raise InvalidArgumentError(f"grid side must be an integer >= 2, got {side}")
        side = int(side)
        axis = np.linspace(0.0, 1.0, side)
        uu, vv = np.meshgrid(axis, axis)
        knots = np.column_stack([uu.ravel(), vv.ravel()])
        levels.append(SpatialKnotLevel(k, side, knots, support_factor / (side - 1)))
    return levels


def apply_water_mask(levels, mask: WaterMask, bbox=None):
    """Drop knots whose location falls in a water cell.

    ``bbox`` maps the unit square to lon/lat; by default the mask itself is
    taken to span the unit square.
    """
    if bbox is None:
        bbox = mask.bbox
    lon_min, lon_max, lat_min, lat_max = bbox
    m_lon_min, m_lon_max, m_lat_min, m_lat_max = mask.bbox
    eps = 1e-9 * max(abs(lon_max - lon_min), abs(lat_max - lat_min))
    if lon_min < m_lon_min - eps or lon_max > m_lon_max + eps or lat_min < m_lat_min - eps or lat_max > m_lat_max + eps:
        raise InvalidArgumentError(f"water mask bbox {mask.bbox} does not cover {tuple(bbox)}")
    out = []
    for level in levels:
        lon = lon_min + level.knots[:, 0] * (lon_max - lon_min)
        lat = lat_min + level.knots[:, 1] * (lat_max - lat_min)
        keep = ~mask.is_water(lon, lat)
        out.append(SpatialKnotLevel(level.level_index, level.grid_side, level.knots[keep], level.support_radius))
    if sum(len(level) for level in out) == 0:
        log.warning("water mask removed every spatial knot")
    return out


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)) or np.any(x < -_UNIT_TOL) or np.any(x > 1 + _UNIT_TOL):
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")
    return np.clip(x, 0.0, 1.0)


def _spatial_block(u, v, levels) -> np.ndarray:
    blocks = []
    for level in levels:
        if len(level) == 0:
            continue
        du = u[:, None] - level.knots[None, :, 0]
        dv = v[:, None] - level.knots[None, :, 1]
        blocks.append(wendland_kernel(np.sqrt(du * du + dv * dv) / level.support_radius))
    if not blocks:
        return np.zeros((len(u), 0))
    return np.concatenate(blocks, axis=1)


def _temporal_block(t, levels) -> np.ndarray:
    blocks = []
    for level in levels:
        z = (t[:, None] - level.centers[None, :]) / level.bandwidth
        blocks.append(np.exp(-0.5 * z * z))
    if not blocks:
        return np.zeros((len(t), 0))
    return np.concatenate(blocks, axis=1)


def spatial_embedding(point, levels) -> np.ndarray:
    u, v = point
    u = _check_unit("u", [u])
    v = _check_unit("v", [v])
    return _spatial_block(u, v, levels)[0]


def spatial_embedding_batch(u, v, levels) -> np.ndarray:
    u = _check_unit("u", np.atleast_1d(u))
    v = _check_unit("v", np.atleast_1d(v))
    out = np.empty((len(u), sum(len(level) for level in levels)))
    for start in range(0, len(u), _CHUNK_ROWS):
        sl = slice(start, start + _CHUNK_ROWS)
        out[sl] = _spatial_block(u[sl], v[sl], levels)
    return out


def make_temporal_centers(counts: Sequence[int] = DEFAULT_TEMPORAL_COUNTS, bandwidth_factor: float = 2.0):
    levels = []
    for k, count in enumerate(counts):
        if int(count) != count or count < 2:
            raise InvalidArgumentError(f"temporal level count must be an integer >= 2, got {count}")
        count = int(count)
        levels.append(TemporalBasisLevel(k, np.linspace(0.0, 1.0, count), bandwidth_factor / (count - 1)))
    return levels


def gaussian_temporal_embedding(t, levels) -> np.ndarray:
    t = _check_unit("t", [t])
    return _temporal_block(t, levels)[0]


def temporal_embedding_batch(t, levels) -> np.ndarray:
    t = _check_unit("t", np.atleast_1d(t))
    return _temporal_block(t, levels)


def embed_space_time(points, spatial_levels, temporal_levels) -> np.ndarray:
    """Embedding matrix for ``(u, v, t)`` rows: temporal block then spatial block."""
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        width = sum(map(len, temporal_levels)) + sum(map(len, spatial_levels))
        return np.zeros((0, width))
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidArgumentError(f"points must have shape (n, 3), got {points.shape}")
    u = _check_unit("u", points[:, 0])
    v = _check_unit("v", points[:, 1])
    t = _check_unit("t", points[:, 2])
    n_t = sum(map(len, temporal_levels))
    n_s = sum(map(len, spatial_levels))
    out = np.empty((len(points), n_t + n_s))
    for start in range(0, len(points), _CHUNK_ROWS):
        sl = slice(start, start + _CHUNK_ROWS)
        out[sl, :n_t] = _temporal_block(t[sl], temporal_levels)
        out[sl, n_t:] = _spatial_block(u[sl], v[sl], spatial_levels)
    return out


class Basis:
    """Knot sets for one configuration, optionally thinned by a water mask."""

    def __init__(self, config: BasisConfig | None = None, mask: WaterMask | None = None, bbox=None):
        self.config = config or BasisConfig()
        self.spatial = make_spatial_knots(self.config.spatial_sides, self.config.support_factor)
        if mask is not None:
            self.spatial = apply_water_mask(self.spatial, mask, bbox)
        self.temporal = make_temporal_centers(self.config.temporal_counts, self.config.bandwidth_factor)

    @property
    def n_temporal(self) -> int:
        return sum(map(len, self.temporal))

    @property
    def n_spatial(self) -> int:
        return sum(map(len, self.spatial))

    @property
    def n_features(self) -> int:
        return self.n_temporal + self.n_spatial

    def digest(self) -> str:
        """Hash of the config plus the surviving knot set."""
        h = hashlib.sha256(self.config.canonical().encode())
        for level in self.spatial:
            h.update(np.ascontiguousarray(level.knots, dtype="<f8").tobytes())
        return h.hexdigest()

    def embed(self, u, v, t) -> np.ndarray:
        return embed_space_time(np.column_stack([np.ravel(u), np.ravel(v), np.ravel(t)]), self.spatial, self.temporal)

    def spatial_channels(self, grid_shape, level: int = 0) -> np.ndarray:
        """Rasterise one spatial level over cell centres as ``(n_knots, ny, nx)``."""
        ny, nx = grid_shape
        uu, vv = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(ny) + 0.5) / ny)
        feats = spatial_embedding_batch(uu.ravel(), vv.ravel(), [self.spatial[level]])
        return feats.T.reshape(-1, ny, nx)


def lipschitz_bound(levels) -> float:
    """Upper bound on |d entry / d point| over all spatial features."""
    d = np.linspace(0.0, 1.0, 100001)
    max_slope = float(np.max(np.abs(wendland_slope(d))))
    return max(max_slope / level.support_radius for level in levels) if levels else 0.0

