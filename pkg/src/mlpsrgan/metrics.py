"""Reference (PSNR, SSIM) and no-reference (entropy, sharpness, wavelet-low)
image quality metrics, plus a multilevel 2-D Daubechies DWT.

All functions take 2-D arrays; a leading singleton channel axis is dropped.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError

DEFAULT_BINS = 256
DEFAULT_WAVELET_ORDER = 2
WAVELET_LEVELS = 5

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

CSV_FIELDS = ["image_id", "psnr", "ssim", "sharpness", "entropy", "wavelet_low"]


def as_image(img) -> np.ndarray:
    a = np.asarray(getattr(img, "data", img), dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {a.shape}")
    return a


def _pair(gen, ref) -> tuple[np.ndarray, np.ndarray]:
    g, r = as_image(gen), as_image(ref)
    if g.shape != r.shape:
        raise ContractError(f"image shapes differ: {g.shape} vs {r.shape}")
    return g, r


# ---------------------------------------------------------------------------
# reference metrics
# ---------------------------------------------------------------------------

def psnr(gen, ref, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if max_val <= 0:
        raise ContractError("max_val must be positive")
    g, r = _pair(gen, ref)
    mse = float(np.mean((g - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim(gen, ref, max_val: float = 1.0, c1: float | None = None, c2: float | None = None,
         windowed: bool = False, sigma: float = 1.5) -> float:
    """Structural similarity.

    By default a single window covering the whole image is used (global
    means, variances and covariance). ``windowed=True`` averages a Gaussian
    weighted local SSIM map instead.
    """
    g, r = _pair(gen, ref)
    c1 = (0.01 * max_val) ** 2 if c1 is None else c1
    c2 = (0.03 * max_val) ** 2 if c2 is None else c2
    if windowed:
        f = lambda a: gaussian_filter(a, sigma, mode="reflect", truncate=3.5)
        mu_g, mu_r = f(g), f(r)
        var_g = f(g * g) - mu_g ** 2
        var_r = f(r * r) - mu_r ** 2
        cov = f(g * r) - mu_g * mu_r
        smap = ((2 * mu_g * mu_r + c1) * (2 * cov + c2)
                / ((mu_g ** 2 + mu_r ** 2 + c1) * (var_g + var_r + c2)))
        return float(smap.mean())
    mu_g, mu_r = g.mean(), r.mean()
    var_g, var_r = g.var(), r.var()
    cov = ((g - mu_g) * (r - mu_r)).mean()
    return float((2 * mu_g * mu_r + c1) * (2 * cov + c2)
                 / ((mu_g ** 2 + mu_r ** 2 + c1) * (var_g + var_r + c2)))


# ---------------------------------------------------------------------------
# no-reference metrics
# ---------------------------------------------------------------------------

def shannon_entropy(img, bins: int = DEFAULT_BINS, max_val: float = 1.0, base: float = 2.0) -> float:
    """Entropy of the intensity histogram over ``bins`` equal bins on ``[0, max_val]``."""
    if bins < 2:
        raise ContractError("entropy needs at least 2 bins")
    a = as_image(img)
    counts, _ = np.histogram(np.clip(a, 0.0, max_val), bins=bins, range=(0.0, max_val))
    p = counts[counts > 0] / a.size
    h = -float(np.sum(p * np.log(p))) / math.log(base)
    return h + 0.0  # normalizes -0.0


def sobel_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """Sobel responses ``(gx, gy)`` with mirror-reflected borders."""
    a = as_image(img)
    if min(a.shape) < 3:
        raise ContractError("sharpness needs an image of at least 3x3")
    p = np.pad(a, 1, mode="reflect")
    # separable form: central difference along one axis, [1, 2, 1] smoothing along the other
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def sharpness(img) -> float:
    """Mean Sobel gradient magnitude."""
    gx, gy = sobel_gradients(img)
    return float(np.mean(np.hypot(gx, gy)))


# ---------------------------------------------------------------------------
# wavelets
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def daubechies_filter(order: int) -> np.ndarray:
    """Low-pass Daubechies filter with ``order`` vanishing moments (``2*order`` taps).

    Built by spectral factorization: the minimum-phase roots of the
    half-band polynomial times ``order`` zeros at z = -1, scaled so the taps
    sum to sqrt(2).
    """
    if not 1 <= order <= 8:
        raise ConfigError(f"wavelet order must be in 1..8, got {order}")
    h = np.array([1.0])
    if order > 1:
        coeffs = [math.comb(order - 1 + k, k) for k in range(order)]
        zeros = []
        for y in np.roots(coeffs[::-1]):
            pair = np.roots([1.0, -(2.0 - 4.0 * y), 1.0])
            zeros.append(pair[np.argmin(np.abs(pair))])
        h = np.real(np.poly(zeros))
    for _ in range(order):
        h = np.convolve(h, [1.0, 1.0])
    h = h * math.sqrt(2.0) / h.sum()
    h.setflags(write=False)
    return h


def quadrature_mirror(h: np.ndarray) -> np.ndarray:
    n = len(h)
    return np.array([(-1) ** j * h[n - 1 - j] for j in range(n)])


def _extension_index(idx: np.ndarray, n: int, mode: str) -> np.ndarray:
    if mode == "periodization":
        return idx % n
    # half-sample symmetric: ... x1 x0 | x0 x1 ... x(n-1) | x(n-1) x(n-2) ...
    period = 2 * n
    m = idx % period
    return np.where(m < n, m, period - 1 - m)


def dwt1(x: np.ndarray, order: int, axis: int = -1, mode: str = "symmetric") -> tuple[np.ndarray, np.ndarray]:
    """One analysis level along ``axis``; both outputs have ``ceil(n/2)`` samples."""
    h = daubechies_filter(order)
    g = quadrature_mirror(h)
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    n = x.shape[-1]
    if mode == "periodization" and n % 2:
        x = np.concatenate([x, x[..., -1:]], axis=-1)
        n += 1
    elif mode not in ("periodization", "symmetric"):
        raise ConfigError(f"unknown boundary mode {mode!r}")
    half = (n + 1) // 2
    taps = len(h)
    base = 2 * np.arange(half)[:, None] + np.arange(taps)[None, :] + (1 - taps // 2)
    idx = _extension_index(base, n, mode)
    lo = np.zeros(x.shape[:-1] + (half,))
    hi = np.zeros_like(lo)
    for j in range(taps):
        xj = x[..., idx[:, j]]
        lo += h[j] * xj
        hi += g[j] * xj
    return np.moveaxis(lo, -1, axis), np.moveaxis(hi, -1, axis)


def dwt2(img, order: int = DEFAULT_WAVELET_ORDER, mode: str = "symmetric"):
    """Single 2-D level: ``(approx, (horizontal, vertical, diagonal))``."""
    a = as_image(img)
    lo, hi = dwt1(a, order, axis=1, mode=mode)
    ll, lh = dwt1(lo, order, axis=0, mode=mode)
    hl, hh = dwt1(hi, order, axis=0, mode=mode)
    return ll, (lh, hl, hh)


@dataclass
class DwtPyramid:
    wavelet_order: int
    mode: str
    approximations: list[np.ndarray] = field(default_factory=list)
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def levels(self) -> list[tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        return list(zip(self.approximations, self.details))


def dwt2_multilevel(img, levels: int = WAVELET_LEVELS, wavelet_order: int = DEFAULT_WAVELET_ORDER,
                    mode: str = "symmetric") -> DwtPyramid:
    """Recursive 2-D DWT keeping every level's approximation band."""
    if levels < 1:
        raise ContractError("levels must be >= 1")
    a = as_image(img)
    taps = 2 * wavelet_order
    pyr = DwtPyramid(wavelet_order, mode)
    for s in range(1, levels + 1):
        if min(a.shape) < taps:
            raise ContractError(f"level {s} input {a.shape} is smaller than the {taps}-tap filter")
        a, det = dwt2(a, wavelet_order, mode)
        pyr.approximations.append(a)
        pyr.details.append(det)
    return pyr


def wavelet_low(img, levels: int = WAVELET_LEVELS, wavelet_order: int = DEFAULT_WAVELET_ORDER,
                mode: str = "symmetric") -> float:
    """Sum over levels of approximation-band energy, divided by the original pixel count."""
    a = as_image(img)
    pyr = dwt2_multilevel(a, levels, wavelet_order, mode)
    return float(sum(np.sum(A * A) for A in pyr.approximations) / a.size)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    image_id: str
    sharpness: float
    entropy: float
    wavelet_low: float
    psnr: float | None = None
    ssim: float | None = None

    def as_row(self) -> dict[str, str]:
        def fmt(v):
            if v is None:
                return ""
            if math.isinf(v):
                return "inf"
            return repr(float(v))
        return {k: (self.image_id if k == "image_id" else fmt(getattr(self, k))) for k in CSV_FIELDS}

    def values(self) -> dict[str, float]:
        out = {k: getattr(self, k) for k in CSV_FIELDS[1:]}
        return {k: v for k, v in out.items() if v is not None}


def evaluate_image(img, ref=None, image_id: str = "", max_val: float = 1.0,
                   bins: int = DEFAULT_BINS, wavelet_order: int = DEFAULT_WAVELET_ORDER,
                   levels: int = WAVELET_LEVELS) -> MetricReport:
    a = as_image(img)
    report = MetricReport(
        image_id=image_id,
        sharpness=sharpness(a),
        entropy=shannon_entropy(a, bins, max_val),
        wavelet_low=wavelet_low(a, levels, wavelet_order),
    )
    if ref is not None:
        report.psnr = psnr(a, ref, max_val)
        report.ssim = ssim(a, ref, max_val)
    return report


def write_metrics_csv(path, reports: Iterable[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.as_row())


def read_metrics_csv(path) -> list[MetricReport]:
    def parse(v: str):
        return None if v == "" else float(v)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ContractError(f"{path}: missing metric columns {sorted(missing)}")
        return [MetricReport(image_id=row["image_id"], sharpness=parse(row["sharpness"]),
                             entropy=parse(row["entropy"]), wavelet_low=parse(row["wavelet_low"]),
                             psnr=parse(row["psnr"]), ssim=parse(row["ssim"]))
                for row in reader]
