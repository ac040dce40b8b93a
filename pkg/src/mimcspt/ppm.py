"""Binary PPM (P6) and PGM (P5) read/write, bit-exact.

P6 carries H x W x 3 uint8 images (maxval 255); P5 carries H x W uint8 grids
(class ids as gray levels). Float images in [0, 1] convert via round(v * 255).
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm",
           "image_to_bytes", "bytes_to_image"]


class PnmError(ValueError):
    """Malformed P5/P6 payload."""


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """[0,1] float image -> uint8 via round-half-away scaling."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def bytes_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 image (uint8, or float in [0,1]) as binary P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = image_to_bytes(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PnmError(f"P6 needs H x W x 3, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path, grid: np.ndarray) -> None:
    """Write an H x W uint8 grid as binary P5."""
    arr = np.asarray(grid)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise PnmError("P5 values must fit uint8")
        arr = arr.astype(np.uint8)
    if arr.ndim != 2:
        raise PnmError(f"P5 needs H x W, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(arr).tobytes())


def _read_header(blob: bytes, magic: bytes, path) -> tuple[int, int, int]:
    """Parse 'P6\\n<w> <h>\\n<maxval>\\n' allowing comments and any whitespace."""
    if not blob.startswith(magic):
        raise PnmError(f"{path}: expected {magic.decode()} header")
    fields: list[int] = []
    i = len(magic)
    while len(fields) < 3:
        if i >= len(blob):
            raise PnmError(f"{path}: truncated header")
        c = blob[i:i + 1]
        if c == b"#":
            i = blob.index(b"\n", i) + 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            fields.append(int(blob[i:j]))
            i = j
    if fields[2] != 255:
        raise PnmError(f"{path}: maxval must be 255, got {fields[2]}")
    return fields[0], fields[1], i + 1  # single whitespace byte after maxval


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into an H x W x 3 uint8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    w, h, offset = _read_header(blob, b"P6", path)
    need = w * h * 3
    raw = blob[offset:offset + need]
    if len(raw) != need:
        raise PnmError(f"{path}: expected {need} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into an H x W uint8 array."""
    with open(path, "rb") as f:
        blob = f.read()
    w, h, offset = _read_header(blob, b"P5", path)
    need = w * h
    raw = blob[offset:offset + need]
    if len(raw) != need:
        raise PnmError(f"{path}: expected {need} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
