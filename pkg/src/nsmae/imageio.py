"""Binary PPM (P6) / PGM (P5) writers and readers.

Depth maps are stored as 16-bit PGM with the metres-per-unit scale in a
``# meters_per_unit <value>`` header comment.
"""

from __future__ import annotations

import os

import numpy as np

DEFAULT_METERS_PER_UNIT = 0.001


def write_ppm(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, float), 0.0, 1.0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm(path, values: np.ndarray, meters_per_unit: float | None = DEFAULT_METERS_PER_UNIT) -> None:
    """16-bit PGM. With ``meters_per_unit=None`` values are written as raw counts."""
    arr = np.asarray(values, float)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got {arr.shape}")
    units = arr if meters_per_unit is None else arr / meters_per_unit
    data = np.clip(np.round(units), 0, 65535).astype(">u2")
    h, w = arr.shape
    header = "P5\n"
    if meters_per_unit is not None:
        header += f"# meters_per_unit {meters_per_unit!r}\n"
    header += f"{w} {h}\n65535\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def write_mask_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask, bool)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((m.astype(np.uint8) * 255).tobytes())


def _read_header(f, n_fields: int):
    fields, comments = [], []
    while len(fields) < n_fields:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.decode("ascii").strip()
        if line.startswith("#"):
            comments.append(line[1:].strip())
            continue
        fields.extend(line.split())
    return fields, comments


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        (magic, w, h, maxval), _ = _read_header(f, 4)
        if magic != "P6":
            raise ValueError(f"{os.fspath(path)}: not a P6 file")
        w, h, maxval = int(w), int(h), int(maxval)
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3) / maxval


def read_pgm(path) -> tuple[np.ndarray, float | None]:
    """Returns (values, meters_per_unit); values are metres when a scale is present."""
    with open(path, "rb") as f:
        (magic, w, h, maxval), comments = _read_header(f, 4)
        if magic != "P5":
            raise ValueError(f"{os.fspath(path)}: not a P5 file")
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u2" if maxval > 255 else np.uint8
        data = np.frombuffer(f.read(), dtype=dtype)[: w * h].reshape(h, w).astype(float)
    scale = None
    for c in comments:
        if c.startswith("meters_per_unit"):
            scale = float(c.split()[1])
    return (data * scale if scale is not None else data), scale
