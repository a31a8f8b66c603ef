"""Paired t-tests on log-transformed metric values."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .errors import ContractError
from .metrics import CSV_FIELDS, MetricReport

METRICS = CSV_FIELDS[1:]
COMPARE_FIELDS = ["metric", "t", "p", "df", "n"]
ZERO_SPREAD = 1e-12


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    if df <= 0:
        raise ContractError("degrees of freedom must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return 1.0 - tail if t > 0 else tail


def two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, float(betainc(df / 2.0, 0.5, df / (df + t * t))))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    n: int


def paired_t_test_log(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``ln a - ln b``.

    A zero-variance difference (spread at rounding level) gives ``p = 0`` (``t = +-inf``) when its mean
    is nonzero and ``p = 1`` (``t = 0``) when it is zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ContractError("paired t-test needs at least 2 pairs")
    if not (np.isfinite(a).all() and np.isfinite(b).all()) or (a <= 0).any() or (b <= 0).any():
        raise ContractError("log-domain t-test needs finite positive values")
    d = np.log(a) - np.log(b)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    # log rounding leaves ~1e-16 spread on exact ratios; count it as zero variance
    if sd <= ZERO_SPREAD * float(np.abs(d).max()):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, df, n)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, n)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, two_sided_p(t, df), df, n)


def _by_id(reports: Sequence[MetricReport]) -> dict[str, MetricReport]:
    out = {}
    for r in reports:
        if r.image_id in out:
            raise ContractError(f"duplicate image id {r.image_id!r}")
        out[r.image_id] = r
    return out


def compare_methods(reports_a: Sequence[MetricReport],
                    reports_b: Sequence[MetricReport]) -> list[dict]:
    """One t-test row per metric that both report sets carry for every paired image.

    Images are paired by id. Unmatched ids are ignored; no overlap at all is an
    error. Rows whose values are not all finite and positive (for example
    the ``inf`` PSNR of identical images) are skipped.
    """
    a, b = _by_id(reports_a), _by_id(reports_b)
    ids = sorted(a.keys() & b.keys())
    if not ids:
        raise ContractError("report sets share no image ids; cannot pair")
    rows = []
    for metric in METRICS:
        va = [getattr(a[i], metric) for i in ids]
        vb = [getattr(b[i], metric) for i in ids]
        if any(v is None for v in va + vb):
            continue
        va, vb = np.array(va, dtype=float), np.array(vb, dtype=float)
        if np.array_equal(va, vb):
            rows.append({"metric": metric, "t": 0.0, "p": 1.0, "df": len(ids) - 1, "n": len(ids)})
            continue
        if not (np.isfinite(va).all() and np.isfinite(vb).all()) or min(va.min(), vb.min()) <= 0:
            continue
        r = paired_t_test_log(va, vb)
        rows.append({"metric": metric, "t": r.t, "p": r.p, "df": r.df, "n": r.n})
    return rows


def write_compare_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, COMPARE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("t", "p") else r[k]) for k in COMPARE_FIELDS})


def read_compare_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"metric": r["metric"], "t": float(r["t"]), "p": float(r["p"]),
                 "df": int(r["df"]), "n": int(r["n"])} for r in csv.DictReader(fh)]
