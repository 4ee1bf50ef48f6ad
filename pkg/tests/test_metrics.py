import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopal.metrics import (
    CAP_DB, EnhancementRow, SeparationRow, SnrReport, output_snr, quartiles, rank_correlation, ratio_db,
    rows_to_csv, snr_from_components, snr_improvement, summarize, summary_to_csv,
)
from coopal.signal import FirFilter


def images(seed=0, P=2, M=3, T=2000):
    return np.random.default_rng(seed).standard_normal((P, M, T))


def test_zero_interference_is_capped():
    im = images()
    im[1] = 0.0
    assert output_snr(np.ones((3, 4)), im, 0) == CAP_DB
    assert output_snr(np.ones((3, 4)), im, 1) == -CAP_DB


def test_equal_energy_is_zero_db():
    x = np.random.default_rng(1).standard_normal((1, 500))
    im = np.stack([x, -x[:, ::-1]])
    assert output_snr(np.array([[1.0]]), im, 0) == pytest.approx(0.0, abs=1e-12)


def test_identity_filter_matches_direct_ratio():
    im = images(2)
    for m in range(3):
        taps = np.zeros((3, 1))
        taps[m, 0] = 1.0
        direct = 10 * np.log10(np.sum(im[0, m] ** 2) / np.sum(im[1, m] ** 2))
        assert output_snr(taps, im, 0) == pytest.approx(direct, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_scale_invariance(c, seed):
    im = images(seed, T=300)
    taps = np.random.default_rng(seed + 1).standard_normal((3, 6))
    assert abs(output_snr(c * taps, im, 0) - output_snr(taps, im, 0)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_two_source_antisymmetry(seed):
    im = images(seed, T=300)
    taps = np.random.default_rng(seed + 1).standard_normal((3, 6))
    assert output_snr(taps, im, 0) == pytest.approx(-output_snr(taps, im, 1), abs=1e-9)


def test_noise_counts_as_interference():
    im = images(3, P=1)
    noise = images(4, P=1)[0]
    filt = FirFilter(np.eye(3)[:, [0]])
    ref = 10 * np.log10(np.sum(im[0, 0] ** 2) / np.sum(noise[0] ** 2))
    assert output_snr(filt, im, 0, noise) == pytest.approx(ref)
    assert output_snr(filt, im, 0) == CAP_DB


def test_target_index_checked():
    with pytest.raises(IndexError):
        output_snr(np.ones((3, 1)), images(), 2)
    with pytest.raises(IndexError):
        snr_from_components(np.ones((2, 5)), -1)


def test_ratio_sentinels():
    assert ratio_db(0.0, 0.0) == -CAP_DB
    assert ratio_db(1.0, 0.0) == CAP_DB
    assert ratio_db(0.0, 1.0) == -CAP_DB
    assert ratio_db(1e-300, 1e300) == -CAP_DB


def test_improvement():
    assert snr_improvement(3.5, 3.5) == 0.0
    np.testing.assert_array_equal(snr_improvement([1.0, 5.0], [2.0, 2.0]), [-1.0, 3.0])


def test_quartiles_linear_interpolation():
    q = quartiles([9, 1, 2])
    assert q == {"count": 3, "q1": 1.5, "median": 2.0, "q3": 5.5}


def rows():
    sep = [SeparationRow("iva", "all", 2, n, n, s, s - 1) for n, s in enumerate((4.0, 8.0))]
    enh = [
        EnhancementRow("iva", "all", 2, n, "a", ear, e, e - 2)
        for n, e in enumerate((6.0, 11.0)) for ear in ("left", "right")
    ]
    return SnrReport(sep, enh)


def test_summary_single_value_has_zero_iqr():
    rep = SnrReport([SeparationRow("ideal", "all", 1, 0, 0, 7.25, 3.0)])
    t = summarize(rep)["table"][0]
    assert t["snr"]["median"] == 7.25 and t["snr"]["q1"] == t["snr"]["q3"] == 7.25
    assert t["improvement"]["median"] == 3.0


def test_summary_table_and_scatter():
    s = summarize([rows(), SnrReport()])
    kinds = [(t["kind"], t["method"], t["array_config"]) for t in s["table"]]
    assert kinds == [("separation", "iva", "all"), ("enhancement", "iva", "all")]
    assert len(s["scatter"]) == 4
    assert {(p["separation_snr_db"], p["enhancement_snr_db"]) for p in s["scatter"]} == {(4.0, 6.0), (8.0, 11.0)}
    with pytest.raises(ValueError):
        summarize([])


def test_rank_correlation():
    pts = [{"separation_snr_db": a, "enhancement_snr_db": b} for a, b in [(1, 2), (2, 3), (3, 10), (4, 11)]]
    assert rank_correlation(pts) == pytest.approx(1.0)
    rev = [{"separation_snr_db": -p["separation_snr_db"], "enhancement_snr_db": p["enhancement_snr_db"]} for p in pts]
    assert rank_correlation(rev) == pytest.approx(-1.0)
    assert np.isnan(rank_correlation(pts[:2]))


def test_csv_is_deterministic_and_formatted():
    text = rows_to_csv(rows().enhancement)
    lines = text.splitlines()
    assert lines[0] == "method,array_config,n_sources,source,listener,ear,snr_db,improvement_db"
    assert lines[1] == "iva,all,2,0,a,left,6.000000,4.000000"
    assert text == rows_to_csv(rows().enhancement)
    summ = summary_to_csv(summarize(rows())).splitlines()
    assert summ[0].startswith("kind,method,array_config,count,snr_q1_db")
    assert summ[1].startswith("separation,iva,all,2,5.000000,6.000000,7.000000")
