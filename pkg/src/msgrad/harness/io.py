"""Binary PGM/PPM rasters and CSV emission."""

from __future__ import annotations

import csv
from collections.abc import Iterable, Mapping, Sequence
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..tensor import Tensor

__all__ = ["RasterError", "load_raster", "save_raster", "emit_csv", "format_value", "SCHEMAS"]

# column layouts of the CSV files written by experiments and training runs
SCHEMAS = {
    "example1": ["sigma", "level_pair", "delta_g", "oracle_delta_g"],
    "coarsen_crop": ["h", "r_coarsen", "r_crop", "n_samples"],
    "history": ["step", "level", "loss", "metric", "wu_num", "wu_den", "seconds"],
    "ledger": ["level", "images", "wu_numerator", "wu_denominator"],
    "variance": ["seed", "term", "level", "batch", "variance", "mean_norm"],
    "residual_order": ["seed", "size", "h", "residual"],
}


class RasterError(ValueError):
    """Malformed or truncated PGM/PPM data."""


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise RasterError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def load_raster(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 as ``(C, H, W)`` in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise RasterError(f"unsupported magic {magic!r} at byte 0")
    channels = 1 if magic == b"P5" else 3
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        offset = pos - len(tok)
        try:
            fields.append(int(tok))
        except ValueError:
            raise RasterError(f"bad header field {tok!r} at byte {offset}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise RasterError(f"bad dimensions {width}x{height} at byte {offset}")
    if maxval != 255:
        raise RasterError(f"maxval {maxval} at byte {offset} is not supported (need 255)")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise RasterError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise RasterError(f"truncated payload: expected {need} bytes from byte {pos}, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_raster(image, path) -> None:
    """Write ``(C, H, W)`` or ``(H, W)`` values in [0, 1] as P5 (C=1) or P6 (C=3)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    c, h, w = arr.shape
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.transpose(1, 2, 0).tobytes())


def format_value(v) -> str:
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(records: Iterable[Mapping | Sequence], schema: Sequence[str], path) -> None:
    """Header row then one row per record; floats keep 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema)
        for rec in records:
            row = [rec[k] for k in schema] if isinstance(rec, Mapping) else list(rec)
            if len(row) != len(schema):
                raise ValueError(f"record has {len(row)} fields, schema has {len(schema)}")
            w.writerow([format_value(v) for v in row])
