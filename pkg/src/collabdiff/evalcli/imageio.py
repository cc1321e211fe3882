"""Binary PPM (P6) and PGM (P5) images, 8-bit."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.nan_to_num(values), 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> Path:
    """Write an ``[H, W, 3]`` float image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM needs an [H, W, 3] image")
    h, w, _ = image.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(image).tobytes())
    return path


def write_pgm(path, image: np.ndarray, normalize: bool = False) -> Path:
    """Write an ``[H, W]`` map; values are clipped to [0, 1] unless ``normalize`` rescales min..max."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM needs an [H, W] map")
    if normalize:
        lo, hi = image.min(), image.max()
        image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    h, w = image.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + _to_u8(image).tobytes())
    return path


def write_mask_pgm(path, mask: np.ndarray) -> Path:
    """Class maps are stored as raw class ids."""
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = mask.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + mask.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file as uint8 ``[H, W]`` or ``[H, W, 3]``."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in ("P5", "P6"):
        raise ValueError(f"unsupported PNM header {tokens}")
    channels = 3 if magic == "P6" else 1
    arr = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()
