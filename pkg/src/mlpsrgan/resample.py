"""Separable bicubic (cubic-convolution) resampling."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .errors import ContractError

CUBIC_A = -0.5
SLICE_FACTOR = 4


def cubic_kernel(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def resize_weights(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """``(n_out, n_in)`` interpolation matrix with half-pixel centers and edge clamping."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    w = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(w, (np.arange(n_out), idx), cubic_kernel(frac - k, a))
    w.setflags(write=False)
    return w


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``img`` to ``(out_h, out_w)``."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"output extents must be >= 1, got {(out_h, out_w)}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    out = img
    if out_w != w:
        out = out @ resize_weights(w, out_w).T
    if out_h != h:
        out = np.swapaxes(np.swapaxes(out, -1, -2) @ resize_weights(h, out_h).T, -1, -2)
    return np.ascontiguousarray(out)


def degrade(hr_slice: np.ndarray, factor: int = SLICE_FACTOR) -> np.ndarray:
    """Shrink the slice (second) axis by ``factor``; the first axis is untouched."""
    h, w = hr_slice.shape[-2:]
    if w % factor:
        raise ContractError(f"slice axis {w} is not divisible by {factor}")
    return bicubic_resize(hr_slice, h, w // factor)


def bicubic_upscale(lr_slice: np.ndarray, factor: int = SLICE_FACTOR) -> np.ndarray:
    """Baseline: bicubic enlargement of the slice axis."""
    h, w = lr_slice.shape[-2:]
    return bicubic_resize(lr_slice, h, w * factor)
