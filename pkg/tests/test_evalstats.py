import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mlpsrgan import evalstats as E
from mlpsrgan.errors import ContractError
from mlpsrgan.metrics import MetricReport

mp.mp.dps = 40


def t_cdf_oracle(t, nu):
    """Student-t CDF by high-precision quadrature of the density."""
    t, nu = mp.mpf(t), mp.mpf(nu)
    c = mp.gamma((nu + 1) / 2) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    half = mp.quad(pdf, [0, abs(t)])
    return float(0.5 + half if t >= 0 else 0.5 - half)


T_GRID = [-10.0, -6.5, -3.0, -1.7, -0.4, 0.0, 0.25, 1.0, 2.2, 4.9, 10.0]


@pytest.mark.parametrize("df", [1, 5, 30])
def test_t_cdf_matches_quadrature(df):
    err = max(abs(E.t_cdf(t, df) - t_cdf_oracle(t, df)) for t in T_GRID)
    assert err < 1e-8


def test_t_cdf_closed_forms():
    # df = 1 is the Cauchy distribution
    for t in (-3.0, 0.5, 7.0):
        assert E.t_cdf(t, 1) == pytest.approx(0.5 + math.atan(t) / math.pi, abs=1e-15)
    # df = 2 has CDF 1/2 + t / (2 sqrt(t^2 + 2))
    for t in (-1.0, 2.0):
        assert E.t_cdf(t, 2) == pytest.approx(0.5 + t / (2 * math.sqrt(t * t + 2)), abs=1e-15)


def test_identical_samples():
    r = E.paired_t_test_log([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert (r.t, r.p, r.df, r.n) == (0.0, 1.0, 2, 3)


def test_known_differences():
    d = np.array([0.1, 0.2, 0.3, 0.4])
    r = E.paired_t_test_log(np.exp(d), np.ones(4))
    t_expected = d.mean() / (d.std(ddof=1) / 2.0)
    assert r.t == pytest.approx(t_expected, rel=1e-12)
    assert r.t == pytest.approx(3.872983346207417, rel=1e-12)
    assert r.p == pytest.approx(2 * (1 - t_cdf_oracle(t_expected, 3)), abs=1e-10)
    # published two-sided critical value t(0.05, 3) = 3.182 and t(0.02, 3) = 4.541
    assert 0.02 < r.p < 0.05


def test_zero_variance_sentinels():
    r = E.paired_t_test_log([2.0, 4.0, 6.0], [1.0, 2.0, 3.0])
    assert r.p == 0.0 and math.isinf(r.t) and r.t > 0
    r = E.paired_t_test_log([1.0, 2.0], [2.0, 4.0])
    assert r.p == 0.0 and r.t < 0


@pytest.mark.parametrize("a,b", [([1.0], [1.0]), ([1.0, 2.0], [1.0]), ([1.0, 0.0], [1.0, 1.0]),
                                 ([1.0, -2.0], [1.0, 1.0]), ([1.0, math.nan], [1.0, 1.0])])
def test_contract(a, b):
    with pytest.raises(ContractError):
        E.paired_t_test_log(a, b)


positive = st.lists(st.floats(0.01, 100.0), min_size=2, max_size=12)


@settings(max_examples=80, deadline=None)
@given(pairs=st.lists(st.tuples(st.floats(0.01, 100.0), st.floats(0.01, 100.0)), min_size=2,
                      max_size=12),
       scale=st.floats(0.01, 100.0))
def test_properties(pairs, scale):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    r = E.paired_t_test_log(a, b)
    assert 0.0 <= r.p <= 1.0
    s = E.paired_t_test_log(b, a)
    assert s.t == -r.t or (math.isnan(r.t) and math.isnan(s.t))
    assert s.p == r.p
    d = np.log(a) - np.log(b)
    assume(d.std(ddof=1) > 1e-6 * max(1.0, abs(d.mean())))
    k = E.paired_t_test_log(a * scale, b * scale)
    assert k.t == pytest.approx(r.t, rel=1e-6, abs=1e-9)
    assert k.p == pytest.approx(r.p, rel=1e-6, abs=1e-12)


def _reports(values, ids=None):
    ids = ids or [f"img{i}" for i in range(len(values))]
    return [MetricReport(i, sharpness=v, entropy=v + 1, wavelet_low=v / 2, psnr=20 + v, ssim=0.5)
            for i, v in zip(ids, values)]


def test_compare_identical_all_p_one():
    rows = E.compare_methods(_reports([1.0, 2.0, 3.0]), _reports([1.0, 2.0, 3.0]))
    assert [r["metric"] for r in rows] == ["psnr", "ssim", "sharpness", "entropy", "wavelet_low"]
    assert all(r["p"] == 1.0 and r["n"] == 3 for r in rows)


def test_compare_no_reference_metrics_only():
    a = [MetricReport(f"i{k}", 1.0 + k, 2.0, 0.5 + k) for k in range(3)]
    b = [MetricReport(f"i{k}", 1.5 + k * 1.1, 2.1, 0.4 + k) for k in range(3)]
    rows = E.compare_methods(a, b)
    assert [r["metric"] for r in rows] == ["sharpness", "entropy", "wavelet_low"]


def test_compare_pairs_by_id():
    a = _reports([1.0, 2.0, 3.0], ["x", "y", "z"])
    b = list(reversed(_reports([1.0, 2.0, 3.0], ["x", "y", "z"])))
    assert all(r["p"] == 1.0 for r in E.compare_methods(a, b))


def test_compare_disjoint_ids():
    with pytest.raises(ContractError):
        E.compare_methods(_reports([1.0, 2.0], ["a", "b"]), _reports([1.0, 2.0], ["c", "d"]))


def test_compare_csv_round_trip(tmp_path):
    rows = E.compare_methods(_reports([1.0, 2.0, 3.5]), _reports([1.2, 2.5, 3.0]))
    E.write_compare_csv(tmp_path / "c.csv", rows)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "metric,t,p,df,n"
    back = E.read_compare_csv(tmp_path / "c.csv")
    assert back == [{k: r[k] for k in E.COMPARE_FIELDS} for r in rows]
