"""Cube files: a small text header plus a raw little-endian float32 payload.

Header (``key: value`` lines after a magic first line)::

    HSCUBE 1
    width: 64
    height: 64
    bands: 32
    dtype: f32
    order: band-sequential
    endian: little
    data: z.raw

The payload holds ``bands`` images of ``height x width`` in row-major
order, one after the other.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "HSCUBE 1"


def payload_path(path) -> Path:
    path = Path(path)
    if path.suffix == ".raw":
        raise ValueError(f"{path}: header path must not end in .raw")
    return path.with_suffix(".raw")


def write_cube(cube, path) -> None:
    """Write a ``(bands, height, width)`` cube (a 2-D array counts as one band)."""
    cube = np.asarray(cube)
    if cube.ndim == 2:
        cube = cube[None]
    if cube.ndim != 3:
        raise ValueError(f"expected a 2-D or 3-D array, got shape {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains non-finite values")
    path = Path(path)
    data = payload_path(path)
    L, h, w = cube.shape
    header = (f"{MAGIC}\nwidth: {w}\nheight: {h}\nbands: {L}\ndtype: f32\n"
              f"order: band-sequential\nendian: little\ndata: {data.name}\n")
    path.write_text(header)
    data.write_bytes(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_header(path) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError(f"{path}: bad magic, expected {MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"{path}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    for key in ("width", "height", "bands"):
        try:
            fields[key] = int(fields[key])
        except (KeyError, ValueError):
            raise ValueError(f"{path}: missing or invalid {key!r}") from None
        if fields[key] < 1:
            raise ValueError(f"{path}: {key} must be positive")
    expected = {"dtype": "f32", "order": "band-sequential", "endian": "little"}
    for key, val in expected.items():
        if fields.get(key) != val:
            raise ValueError(f"{path}: unsupported {key} {fields.get(key)!r}")
    return fields


def read_cube(path) -> np.ndarray:
    """Read a cube as a float32 ``(bands, height, width)`` array."""
    path = Path(path)
    hdr = read_header(path)
    data = path.parent / hdr.get("data", payload_path(path).name)
    raw = data.read_bytes()
    L, h, w = hdr["bands"], hdr["height"], hdr["width"]
    if len(raw) != 4 * L * h * w:
        raise ValueError(f"{data}: expected {4 * L * h * w} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(L, h, w).astype(np.float32)
