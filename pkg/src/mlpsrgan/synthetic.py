"""Seeded brain-like phantoms for tests, demos and the desk-scale training run."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data_io import Volume
from .errors import ContractError


def phantom_slice(rng: np.random.Generator, h: int = 64, w: int = 64) -> np.ndarray:
    """One 2-D phantom in ``[0, 1]``: an elliptical head with smooth tissue texture
    and a few bright focal lesions on a dark background."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h / 2 + rng.uniform(-2, 2), w / 2 + rng.uniform(-2, 2)
    ry, rx = h * rng.uniform(0.36, 0.44), w * rng.uniform(0.32, 0.42)
    r = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    head = ndimage.gaussian_filter((r < 1.0).astype(float), 1.0)
    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.5)
    texture = texture / (np.abs(texture).max() + 1e-12)
    img = head * (0.45 + 0.2 * texture)
    for _ in range(rng.integers(1, 4)):
        ly, lx = cy + rng.uniform(-0.5, 0.5) * ry, cx + rng.uniform(-0.5, 0.5) * rx
        s = rng.uniform(1.5, 3.5)
        img += rng.uniform(0.3, 0.5) * np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * s * s))
    img = np.clip(img, 0.0, None)
    return img / img.max()


def phantom_slices(n: int, seed: int = 0, h: int = 64, w: int = 64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([phantom_slice(rng, h, w) for _ in range(n)])


def phantom_volume(shape=(16, 64, 64), seed: int = 0, spacing=(1.0, 1.0, 1.0),
                   source_id: str = "") -> Volume:
    """Stack of phantom slices along the first axis, with blank border slices."""
    if shape[0] < 3:
        raise ContractError("phantom volumes need at least 3 slices")
    data = np.zeros(shape)
    data[1:-1] = phantom_slices(shape[0] - 2, seed, shape[1], shape[2])
    return Volume(data, spacing, source_id or f"phantom{seed}")
