"""Binary field storage and portable image previews.

Fields persist in a fixed-layout binary format: a four-byte magic, three
little-endian u32 dimensions ``C H W``, then raw float32 data. Previews are
8-bit PGM (single channel) or PPM (three channels) with per-file min-max
normalization recorded in a sidecar text file, so a preview can always be
traced back to its value range. Binary masks use PGM restricted to the
values 0 and 255.

Writes go through a temporary file and an atomic rename; a crashed run
never leaves a half-written artifact behind.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .errors import FormatError, ParameterError
from .model import Field, validate_field

__all__ = [
    "FIELD_MAGIC",
    "atomic_write_bytes",
    "atomic_write_text",
    "save_field",
    "load_field",
    "write_mask_pgm",
    "read_mask_pgm",
    "write_preview",
]

FIELD_MAGIC = b"LPF1"


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_field(path, x: Field) -> None:
    validate_field(x)
    c, h, w = x.shape
    payload = FIELD_MAGIC + struct.pack("<3I", c, h, w) + np.ascontiguousarray(x).tobytes()
    atomic_write_bytes(path, payload)


def load_field(path) -> Field:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != FIELD_MAGIC:
        raise FormatError("not a field payload: bad magic")
    c, h, w = struct.unpack_from("<3I", data, 4)
    expected = 16 + 4 * c * h * w
    if len(data) != expected:
        raise FormatError(f"field payload has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype=np.float32, offset=16).reshape(c, h, w).copy()


def _parse_pnm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``P5``/``P6`` headers; returns (width, height, maxval, offset)."""
    if not data.startswith(magic):
        raise FormatError(f"expected {magic.decode()} image")
    pos = len(magic)
    values = []
    while len(values) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"malformed header token {token!r}")
        values.append(int(token))
    pos += 1  # single whitespace byte after maxval
    return values[0], values[1], values[2], pos


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Write a binary spatial mask as PGM with values 0 and 255 only."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ParameterError("mask must be 2-d (H, W)")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ParameterError("mask must be binary with values in {0, 1}")
    h, w = m.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + (m.astype(np.uint8) * 255).tobytes())


def read_mask_pgm(path) -> np.ndarray:
    """Read a binary PGM mask back to float32 values in {0, 1}."""
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, maxval, offset = _parse_pnm_header(data, b"P5")
    if maxval != 255:
        raise FormatError(f"mask PGM must use maxval 255, got {maxval}")
    raw = data[offset : offset + w * h]
    if len(raw) != w * h:
        raise FormatError("mask PGM payload truncated")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    bad = ~np.isin(arr, (0, 255))
    if np.any(bad):
        raise FormatError("mask PGM must contain only 0 and 255")
    return (arr == 255).astype(np.float32)


def write_preview(path_base, x: Field) -> str:
    """Render a field to an 8-bit preview next to a normalization sidecar.

    Single-channel fields become ``<base>.pgm``, three-channel fields
    ``<base>.ppm``. Values are min-max normalized per file; the sidecar
    ``<base>.txt`` records the range so absolute values stay recoverable.
    Returns the preview path.
    """
    validate_field(x)
    c, h, w = x.shape
    if c not in (1, 3):
        raise ParameterError(f"previews support 1 or 3 channels, got {c}")
    lo = float(x.min())
    hi = float(x.max())
    span = hi - lo
    if span == 0.0:
        quantized = np.zeros_like(x, dtype=np.uint8)
    else:
        quantized = np.clip((x - lo) / span * 255.0 + 0.5, 0, 255).astype(np.uint8)
    base = os.fspath(path_base)
    if c == 1:
        path = base + ".pgm"
        header = f"P5\n{w} {h}\n255\n".encode("ascii")
        atomic_write_bytes(path, header + quantized[0].tobytes())
    else:
        path = base + ".ppm"
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        interleaved = np.ascontiguousarray(np.moveaxis(quantized, 0, -1))
        atomic_write_bytes(path, header + interleaved.tobytes())
    atomic_write_text(base + ".txt", f"min={lo:.9g}\nmax={hi:.9g}\n")
    return path
