"""Hyperspectral cube container and file formats.

Cubes are stored in the ``FTC1`` layout::

    offset  size        content
    0       4           magic b"FTC1"
    4       3 x u32 LE  H, W, B
    16      u8          1 if a wavenumber axis follows, else 0
    17      B x f64 LE  wavenumbers (only if flag == 1)
    ...     H*W*B x f32 LE  values, index ((h * W) + w) * B + b

Values are held as float64 in memory and stored as float32 on disk, so a
round trip is bit exact for any cube whose values are representable in
single precision (every cube that was itself read from disk).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, FormatError, LengthError

MAGIC = b"FTC1"
_HEADER = struct.Struct("<4sIIIB")


@dataclass(frozen=True)
class WavenumberAxis:
    """Band positions in cm^-1, strictly monotonic in either direction."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionError("wavenumber axis must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise DataError("wavenumber axis contains non-finite values")
        step = np.diff(values)
        if values.size > 1 and not (np.all(step > 0) or np.all(step < 0)):
            raise DataError("wavenumber axis is not strictly monotonic")
        object.__setattr__(self, "values", values)

    @property
    def ascending(self) -> bool:
        return self.values.size < 2 or bool(self.values[1] > self.values[0])

    def __len__(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class HyperCube:
    """An H x W x B absorbance raster.

    Parameters
    ----------
    data : array_like, shape (H, W, B)
        Absorbance values, pixel-interleaved (the last axis is the spectrum).
    wavenumbers : array_like, shape (B,), optional
        Band positions in cm^-1.
    """

    data: np.ndarray
    wavenumbers: np.ndarray | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionError(f"cube data must be 3-D (H, W, B), got shape {data.shape}")
        object.__setattr__(self, "data", data)
        if self.wavenumbers is not None:
            axis = WavenumberAxis(self.wavenumbers)
            if len(axis) != data.shape[2]:
                raise DimensionError(
                    f"wavenumber axis has {len(axis)} entries for {data.shape[2]} bands"
                )
            object.__setattr__(self, "wavenumbers", axis.values)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def axis(self) -> WavenumberAxis | None:
        return None if self.wavenumbers is None else WavenumberAxis(self.wavenumbers)

    def pixel(self, h: int, w: int) -> np.ndarray:
        """Spectrum at row ``h``, column ``w``."""
        return self.data[h, w]

    def flat(self) -> np.ndarray:
        """Pixels as rows, shape (H*W, B)."""
        return self.data.reshape(-1, self.bands)

    def with_data(self, data: np.ndarray) -> "HyperCube":
        return HyperCube(data, self.wavenumbers)

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        if (self.wavenumbers is None) != (other.wavenumbers is None):
            return False
        if self.wavenumbers is not None and not np.array_equal(self.wavenumbers, other.wavenumbers):
            return False
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


def write_cube(cube: HyperCube, path) -> None:
    """Write ``cube`` to ``path`` in FTC1 layout."""
    h, w, b = cube.shape
    if min(h, w, b) <= 0:
        raise DimensionError(f"refusing to write a cube with an empty dimension {cube.shape}")
    if not np.all(np.isfinite(cube.data)):
        raise DataError("cube contains non-finite values")
    has_axis = cube.wavenumbers is not None
    parts = [_HEADER.pack(MAGIC, h, w, b, 1 if has_axis else 0)]
    if has_axis:
        parts.append(cube.wavenumbers.astype("<f8").tobytes())
    parts.append(cube.data.astype("<f4").tobytes())
    _atomic_write(Path(path), b"".join(parts))


def read_cube(path) -> HyperCube:
    """Read an FTC1 file.

    Raises
    ------
    FormatError
        The file does not start with the FTC1 magic or its header is short.
    LengthError
        The payload does not match the announced dimensions.
    DataError
        A stored value is NaN or infinite.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, h, w, b, flag = _HEADER.unpack_from(raw)
    if flag not in (0, 1):
        raise FormatError(f"{path}: invalid axis flag {flag}")
    offset = _HEADER.size
    wavenumbers = None
    if flag:
        end = offset + 8 * b
        if len(raw) < end:
            raise LengthError(f"{path}: truncated wavenumber axis")
        wavenumbers = np.frombuffer(raw, dtype="<f8", count=b, offset=offset).astype(np.float64)
        offset = end
    count = h * w * b
    expected = offset + 4 * count
    if len(raw) != expected:
        raise LengthError(f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}")
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"{path}: non-finite value at flat index {int(bad[0])}")
    if wavenumbers is not None and not np.all(np.isfinite(wavenumbers)):
        raise DataError(f"{path}: non-finite wavenumber")
    return HyperCube(values.astype(np.float64).reshape(h, w, b), wavenumbers)


def export_endmembers_csv(E: np.ndarray, path, axis=None, names: Sequence[str] | None = None) -> None:
    """Write a B x K endmember matrix as CSV, one row per band.

    The first column holds the wavenumber when ``axis`` is given, the band
    index otherwise.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise DimensionError("endmember matrix must be 2-D (B, K)")
    n_bands, k = E.shape
    if axis is not None:
        axis = np.asarray(axis, dtype=np.float64)
        if axis.shape != (n_bands,):
            raise DimensionError(f"axis has {axis.size} entries for {n_bands} bands")
    names = list(names) if names is not None else [f"endmember_{i}" for i in range(k)]
    if len(names) != k:
        raise DimensionError("one name per endmember column is required")
    first = "wavenumber" if axis is not None else "band"
    lines = [",".join([first, *names])]
    for b in range(n_bands):
        lead = repr(float(axis[b])) if axis is not None else str(b)
        lines.append(",".join([lead, *(f"{v:.17g}" for v in E[b])]))
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_endmembers_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverse of :func:`export_endmembers_csv`; returns ``(E, axis_or_None)``."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise FormatError(f"{path}: empty CSV")
    header = text[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line], ndmin=2)
    if rows.shape[1] != len(header):
        raise FormatError(f"{path}: row width does not match header")
    axis = rows[:, 0] if header[0] == "wavenumber" else None
    return rows[:, 1:], axis


def export_abundance_maps(A: np.ndarray, path_prefix) -> list[Path]:
    """Write each abundance channel of a K x H x W map as an 8-bit PGM.

    Pixel values are ``round(255 * a)``. A sidecar ``<prefix>_maps.txt``
    lists the K file names in channel order. Returns the image paths.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 3:
        raise DimensionError("abundance map must be 3-D (K, H, W)")
    prefix = Path(path_prefix)
    k, h, w = A.shape
    pixels = np.rint(255.0 * np.clip(A, 0.0, 1.0)).astype(np.uint8)
    paths = []
    for i in range(k):
        target = prefix.with_name(f"{prefix.name}_{i:02d}.pgm")
        _atomic_write(target, f"P5\n{w} {h}\n255\n".encode() + pixels[i].tobytes())
        paths.append(target)
    sidecar = prefix.with_name(f"{prefix.name}_maps.txt")
    _atomic_write(sidecar, ("\n".join(p.name for p in paths) + "\n").encode())
    return paths


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval 255) PGM written by :func:`export_abundance_maps`."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit P5 image")
    w, h = int(tokens[1]), int(tokens[2])
    # exactly one whitespace byte separates the header from the raster
    payload = raw[pos + 1 :]
    if len(payload) != w * h:
        raise LengthError(f"{path}: expected {w * h} pixel bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"failed to write {path}: {exc}") from exc
