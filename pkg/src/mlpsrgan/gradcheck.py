"""Central finite-difference checking of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

ABS_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Largest elementwise relative error.

    Elements where both values are below ``floor`` in magnitude are compared
    absolutely instead.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(scale < floor, diff, diff / np.where(scale < floor, 1.0, scale))
    return float(err.max())


def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, index: Sequence[int] | None = None,
                 h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the flat entries of ``leaf``.

    ``index`` restricts the probe to those flat positions; other entries of
    the returned array are zero.
    """
    flat = leaf.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    positions = range(flat.size) if index is None else index
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(leaf.shape)


def check_gradients(f: Callable[[], Tensor], leaves: dict[str, Tensor], h: float = 1e-5,
                    max_probes: int | None = 64, seed: int = 0) -> dict[str, float]:
    """Compare ``backward`` against central differences for each leaf.

    Large leaves are probed at ``max_probes`` random positions. Returns the
    worst relative error per leaf name.
    """
    for t in leaves.values():
        t.tracked = True
        t.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in leaves.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        if max_probes is not None and t.size > max_probes:
            idx = np.sort(rng.choice(t.size, size=max_probes, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numeric_grad(f, t, idx, h)
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
    return errors
