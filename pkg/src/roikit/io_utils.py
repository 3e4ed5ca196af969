"""Zero-dependency image output (binary PPM, P6)."""
from __future__ import annotations

import numpy as np


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a (3, h, w) image in [-1, 1] as binary PPM."""
    arr = np.clip((image + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM back into (3, h, w) in [-1, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0
