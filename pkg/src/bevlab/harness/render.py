"""PPM/PGM output of semantic maps and camera images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

BACKGROUND = (30, 30, 30)
# painted in this order; later classes cover earlier ones
CLASS_COLORS = {
    "drivable": (120, 120, 130),
    "walkway": (200, 150, 90),
    "crossing": (70, 160, 230),
    "divider": (250, 220, 40),
}


def render_map(masks: np.ndarray, classes) -> np.ndarray:
    """``(D, W, 3)`` uint8 image of binary ``(C, D, W)`` masks; north (+y) up."""
    _, d, w = masks.shape
    img = np.empty((d, w, 3), np.uint8)
    img[:] = BACKGROUND
    for name in CLASS_COLORS:
        if name in classes:
            img[masks[list(classes).index(name)] > 0] = CLASS_COLORS[name]
    return img[::-1].copy()


def side_by_side(left: np.ndarray, right: np.ndarray, gap: int = 2) -> np.ndarray:
    sep = np.full((left.shape[0], gap, 3), 255, np.uint8)
    return np.concatenate([left, sep, right], axis=1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> Path:
    img = np.asarray(img, np.uint8)
    h, w, _ = img.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    magic, dims, maxval, body = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("unsupported PPM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, np.uint8).reshape(h, w, 3)
