"""Heatmap rendering to PNG with a self-contained encoder."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

MISSING_RGB = (128, 128, 128)

PALETTES = {
    "blues": [(247, 251, 255), (158, 202, 225), (66, 146, 198), (8, 48, 107)],
    "gray": [(0, 0, 0), (255, 255, 255)],
    "heat": [(0, 0, 128), (0, 200, 255), (255, 255, 0), (200, 0, 0)],
}


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)


def encode_png(rgb: np.ndarray) -> bytes:
    """8-bit RGB, no filtering, stored (level 0) deflate blocks."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidArgumentError(f"expected an (H, W, 3) image, got {rgb.shape}")
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 0)) + _chunk(b"IEND", b"")


def decode_png(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_png` for unfiltered RGB images (used in tests)."""
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise InvalidArgumentError("not a PNG")
    pos, idat, w, h = 8, b"", 0, 0
    while pos < len(data):
        (length,) = struct.unpack_from(">I", data, pos)
        tag = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if tag == b"IHDR":
            w, h = struct.unpack_from(">II", body)
        elif tag == b"IDAT":
            idat += body
        pos += 12 + length
    raw = zlib.decompress(idat)
    rows = [raw[r * (3 * w + 1) + 1 : (r + 1) * (3 * w + 1)] for r in range(h)]
    return np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(h, w, 3)


def colorize(field, palette: str = "blues", vmin=None, vmax=None) -> np.ndarray:
    """Linear ramp between ``vmin`` and ``vmax`` (data extremes by default)."""
    if palette not in PALETTES:
        raise InvalidArgumentError(f"unknown palette {palette!r}; choose from {sorted(PALETTES)}")
    field = np.asarray(field, dtype=np.float64)
    finite = np.isfinite(field)
    if vmin is None:
        vmin = float(field[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(field[finite].max()) if finite.any() else 0.0
    span = vmax - vmin
    frac = np.zeros_like(field) if span <= 0 else np.clip((np.where(finite, field, vmin) - vmin) / span, 0.0, 1.0)
    anchors = np.asarray(PALETTES[palette], dtype=np.float64)
    pos = np.linspace(0.0, 1.0, len(anchors))
    rgb = np.stack([np.interp(frac, pos, anchors[:, k]) for k in range(3)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[~finite] = MISSING_RGB
    return rgb


def render_fields(path, fields, palette: str = "blues") -> None:
    """Write fields side by side on a shared colour scale, one pixel per cell.

    Each field is ``[H, W]`` with row 0 at the southern edge, so rows are
    flipped to put north at the top of the image.
    """
    fields = [np.asarray(f, dtype=np.float64) for f in fields]
    stacked = np.concatenate(fields, axis=1)
    finite = np.isfinite(stacked)
    vmin = float(stacked[finite].min()) if finite.any() else 0.0
    vmax = float(stacked[finite].max()) if finite.any() else 0.0
    rgb = colorize(stacked[::-1], palette, vmin, vmax)
    Path(path).write_bytes(encode_png(rgb))
