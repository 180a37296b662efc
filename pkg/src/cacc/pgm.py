"""Binary PGM (P5, 8-bit) reading and writing, plus max-normalized rendering."""

from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes


def write_pgm(path, pixels):
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _tokens(buf):
    """Yield (token, end_offset) for the PGM header, skipping comments."""
    i = 0
    while True:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(buf) and not buf[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated PGM header")
        yield buf[start:i], i


def read_pgm(path):
    buf = Path(path).read_bytes()
    toks = _tokens(buf)
    magic, _ = next(toks)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, _ = next(toks)
    h, _ = next(toks)
    maxval, end = next(toks)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = buf[end + 1:end + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def render(values):
    """Map a nonnegative field to 8-bit grey, scaling the maximum to 255.

    An all-zero (or all-nonpositive) field renders black.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0, None)
    top = v.max() if v.size else 0.0
    if top <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor(v / top * 255.0 + 0.5).astype(np.uint8)
