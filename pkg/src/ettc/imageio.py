from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(image: np.ndarray, path: str | Path) -> tuple[float, float]:
    """Write a binary 8-bit PGM, min-max scaled. Returns the (min, max) used."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = float(a.min()) if a.size else 0.0, float(a.max()) if a.size else 0.0
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.rint((a - lo) * scale), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return lo, hi


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is exactly three newline-terminated lines, as written above
    magic, dims, _maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)
