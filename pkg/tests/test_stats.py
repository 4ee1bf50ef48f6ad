import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopal.signal import stft
from coopal.stats import (
    SpatialStats, SpatialStatsEstimator, cross_spectra, estimate_rtf, estimate_spectra, lag_window,
    load_stats, save_stats, to_lag_domain, window_reir,
)


def white_stats(M=3, N=2, T=20000, frame=256, seed=0, noise=0.0):
    """Independent white sources through random short channels; estimates are exact."""
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((N, T))
    h = rng.standard_normal((N, M, 4)) * np.array([1.0, 0.5, 0.25, 0.1])
    x = sum(np.stack([np.convolve(s[n], h[n, m])[:T] for m in range(M)]) for n in range(N))
    x = x + noise * rng.standard_normal((M, T))
    return estimate_spectra(stft(x, frame, frame // 2), stft(s, frame, frame // 2)), x, s, h


def test_zero_estimate_gives_zero_spectra():
    x = np.random.default_rng(0).standard_normal((2, 4096))
    st_ = estimate_spectra(stft(x, 256, 128), stft(np.zeros((1, 4096)), 256, 128))
    assert not np.any(st_.R_ss) and not np.any(st_.R_xs)


def test_estimate_equal_to_channel():
    x = np.random.default_rng(1).standard_normal((3, 4096))
    st_ = estimate_spectra(stft(x, 256, 128), stft(x[[2]], 256, 128))
    np.testing.assert_allclose(st_.R_xs[0], st_.R_xx[:, :, 2], atol=1e-12)
    np.testing.assert_allclose(st_.R_ss[0], np.real(st_.R_xx[:, 2, 2]), atol=1e-12)


def test_spectra_invariants():
    st_, *_ = white_stats()
    np.testing.assert_allclose(st_.R_xx, st_.R_xx.conj().transpose(0, 2, 1), atol=1e-12)
    assert np.all(np.real(np.diagonal(st_.R_xx, axis1=1, axis2=2)) >= 0)
    assert np.all(st_.R_ss >= 0)


def test_frame_permutation_invariance():
    rng = np.random.default_rng(2)
    X = stft(rng.standard_normal((2, 8192)), 512, 256)
    S = stft(rng.standard_normal((1, 8192)), 512, 256)
    perm = rng.permutation(X.n_frames)
    a = estimate_spectra(X, S)
    b = estimate_spectra(X.with_coeffs(X.coeffs[:, perm]), S.with_coeffs(S.coeffs[:, perm]))
    for f in ("R_ss", "R_xs", "R_xx"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=1e-12)


def test_spectra_errors():
    x = np.random.default_rng(0).standard_normal((1, 600))
    with pytest.raises(ValueError):
        estimate_spectra(stft(x, 512, 256), stft(x, 512, 256))  # one frame
    with pytest.raises(ValueError):
        estimate_spectra(stft(x, 256, 128), stft(x, 128, 64))


def test_rtf_of_two_tap_channel():
    # x = s * [1, -0.6]; with white s the ratio tends to the channel response
    rng = np.random.default_rng(3)
    T = 1001 * 128 + 256
    s = rng.standard_normal(T)
    x = np.convolve(s, [1.0, -0.6])[:T]
    st_ = estimate_spectra(stft(x, 256, 128), stft(s, 256, 128))
    assert st_.n_frames >= 1000
    rtf, active = estimate_rtf(st_)
    H = np.fft.rfft([1.0, -0.6], 256)
    assert active.all()
    assert np.abs(rtf[0, :, 0] - H).max() < 0.1


def test_rtf_self_reference_and_scaling():
    x = np.random.default_rng(4).standard_normal((2, 8192))
    X = stft(x, 256, 128)
    rtf, _ = estimate_rtf(estimate_spectra(X, stft(x[[0]], 256, 128)))
    np.testing.assert_allclose(rtf[0, :, 0], 1.0, atol=1e-12)
    rtf_c, _ = estimate_rtf(estimate_spectra(X, stft(2.5 * x[[0]], 256, 128)))
    np.testing.assert_allclose(rtf_c, rtf / 2.5, atol=1e-12)


def test_rtf_phase_slope_of_pure_delay():
    rng = np.random.default_rng(5)
    d, L, T = 7, 512, 60000
    s = rng.standard_normal(T)
    x = np.r_[np.zeros(d), s[:-d]]
    rtf, _ = estimate_rtf(estimate_spectra(stft(x, L, L // 2), stft(s, L, L // 2)))
    f = np.arange(L // 2 + 1)
    band = slice(5, L // 4)
    phase = np.unwrap(np.angle(rtf[0, :, 0]))
    slope = np.polyfit(f[band], phase[band], 1)[0]
    assert slope == pytest.approx(-2 * np.pi * d / L, rel=0.02)


def test_rtf_floor_and_silent_source():
    R_ss = np.array([[1.0, 1e-12, 2.0, 0.0]])
    R_xs = np.ones((1, 4, 2), complex)
    st_ = SpatialStats(R_ss, R_xs, np.tile(np.eye(2), (4, 1, 1)).astype(complex), 6, 3, 6, 10)
    rtf, active = estimate_rtf(st_)
    assert active.tolist() == [[True, False, True, False]]
    assert not np.any(rtf[0, [1, 3]])
    np.testing.assert_allclose(rtf[0, 2], 0.5)
    silent = SpatialStats(np.zeros((1, 4)), R_xs, st_.R_xx, 6, 3, 6, 10)
    with pytest.raises(ValueError):
        estimate_rtf(silent)


# --- REIR windowing ---------------------------------------------------------


def delay_rtf(d, n_bins, M=1):
    f = np.arange(n_bins)
    fft_len = 2 * (n_bins - 1)
    return np.tile(np.exp(-2j * np.pi * f * d / fft_len)[None, :, None], (1, 1, M))


def test_window_passes_in_window_delay():
    rtf = delay_rtf(100, 4097)
    reir = window_reir(rtf, 4, 32, 16000)
    assert np.abs(reir.A_early - rtf).max() < 1e-6
    # negative (non-causal) delays inside the pre window pass too
    rtf = delay_rtf(-50, 4097)
    assert np.abs(window_reir(rtf, 4, 32, 16000).A_early - rtf).max() < 1e-6


def test_window_suppresses_late_delay():
    rtf = delay_rtf(900, 4097)  # 56 ms > 32 ms + taper
    out = window_reir(rtf, 4, 32, 16000).A_early
    assert np.sum(np.abs(out) ** 2) < 0.01 * np.sum(np.abs(rtf) ** 2)


def test_window_support_and_shape():
    w = lag_window(64, 3, 5, 2)
    lags = np.where(np.arange(64) > 32, np.arange(64) - 64, np.arange(64))
    assert np.all(w[(lags >= -3) & (lags <= 5)] == 1.0)
    assert np.all(w[(lags < -5) | (lags > 7)] == 0.0)
    taper = w[(lags > 5) & (lags <= 7)]
    assert np.all((taper > 0) & (taper < 1)) and taper[0] > taper[1]


def test_window_idempotent_without_taper():
    rtf = np.random.default_rng(6).standard_normal((2, 1025, 3)) + 0j
    once = window_reir(rtf, 4, 32, 16000, taper_ms=0).A_early
    twice = window_reir(once, 4, 32, 16000, taper_ms=0).A_early
    np.testing.assert_allclose(twice, once, atol=1e-12)


def test_window_errors():
    with pytest.raises(ValueError):
        window_reir(delay_rtf(3, 65), 4, 32, 16000)  # 64-point support, window needs 600+ lags
    with pytest.raises(ValueError):
        window_reir(delay_rtf(3, 4097), 0, 0, 16000)


# --- cross-spectra ----------------------------------------------------------


def test_cross_spectra_rank_one_and_zero():
    rng = np.random.default_rng(7)
    R_xs = rng.standard_normal((2, 9, 3)) + 1j * rng.standard_normal((2, 9, 3))
    A = rng.standard_normal((2, 9, 3)) + 1j * rng.standard_normal((2, 9, 3))
    st_ = SpatialStats(np.ones((2, 9)), R_xs, np.tile(np.eye(3), (9, 1, 1)) + 0j, 16, 8, 16, 4)
    C = cross_spectra(st_, A)
    sv = np.linalg.svd(C, compute_uv=False)
    assert np.all(sv[..., 1:] < 1e-10 * sv[..., :1])
    np.testing.assert_allclose(C[..., :, 0] / R_xs, np.broadcast_to(A[..., :1].conj(), R_xs.shape))
    assert not np.any(cross_spectra(st_, np.zeros_like(A)))
    with pytest.raises(ValueError):
        cross_spectra(st_, A[:, :5])


def test_cross_spectra_single_mic():
    R_xs = np.array([[[1 + 2j], [3 - 1j]]])
    A = np.array([[[0.5j], [2.0]]])
    st_ = SpatialStats(np.ones((1, 2)), R_xs, np.ones((2, 1, 1), complex), 2, 1, 2, 2)
    np.testing.assert_allclose(cross_spectra(st_, A)[..., 0, 0], R_xs[..., 0] * A[..., 0].conj())


# --- lag domain -------------------------------------------------------------


def test_lag_convention_matches_time_domain():
    # a single periodogram frame is a circular correlation; check the direct sum
    rng = np.random.default_rng(8)
    n, M = 32, 2
    x = rng.standard_normal((M, n))
    X = np.fft.rfft(x, axis=1)  # (M, F)
    R_xx = np.einsum("mf,kf->fmk", X, X.conj())
    y = rng.standard_normal(n)
    R_xy = X * np.fft.rfft(y).conj()  # (M, F)
    R_xc = R_xy.T[None, :, :, None] * np.ones((1, 1, 1, M))  # any ear column carries R_xy
    corr = to_lag_domain(R_xx, R_xc, [1.0], order=5, delay=3, ear=0)
    for k in range(-5, 6):
        ref = sum(np.outer(x[:, t], x[:, (t - k) % n]) for t in range(n))
        np.testing.assert_allclose(corr.rxx_at(k), ref, atol=1e-10)
    for k in range(3 - 5, 4):
        ref = sum(x[:, t] * y[(t - k) % n] for t in range(n))
        np.testing.assert_allclose(corr.rxy_at(k), ref, atol=1e-10)


def test_lag_flat_spectrum_and_zero_gains():
    F, M = 33, 3
    R_xx = np.tile(np.eye(M), (F, 1, 1)).astype(complex)
    R_xc = np.ones((2, F, M, M), complex)
    corr = to_lag_domain(R_xx, R_xc, [0.0, 0.0], order=6, delay=2)
    np.testing.assert_allclose(corr.rxx_at(0), np.eye(M), atol=1e-12)
    for k in (-6, -1, 1, 6):
        np.testing.assert_allclose(corr.rxx_at(k), 0.0, atol=1e-12)
    assert not np.any(corr.r_xy)
    assert corr.r_xx.shape == (13, M, M) and corr.r_xy.shape == (7, M)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), M=st.integers(1, 4), K=st.integers(0, 10))
def test_lag_transpose_symmetry(seed, M, K):
    rng = np.random.default_rng(seed)
    F = 2 * K + 2 + rng.integers(0, 8)
    B = rng.standard_normal((F, M, M)) + 1j * rng.standard_normal((F, M, M))
    R_xx = B @ B.conj().transpose(0, 2, 1)
    R_xx[0] = R_xx[0].real
    R_xx[-1] = R_xx[-1].real
    corr = to_lag_domain(R_xx, np.zeros((1, F, M, M)), [1.0], K, 0)
    for k in range(K + 1):
        np.testing.assert_allclose(corr.rxx_at(-k), corr.rxx_at(k).T, atol=1e-10)


def test_lag_gain_linearity():
    rng = np.random.default_rng(9)
    F, M = 17, 2
    R_xx = np.tile(np.eye(M), (F, 1, 1)) + 0j
    R_xc = rng.standard_normal((3, F, M, M)) + 1j * rng.standard_normal((3, F, M, M))
    g1, g2 = np.array([1.0, 0.0, 0.5]), np.array([0.0, 2.0, 0.25])
    a = to_lag_domain(R_xx, R_xc, g1, 8, 4, ear=1).r_xy
    b = to_lag_domain(R_xx, R_xc, g2, 8, 4, ear=1).r_xy
    c = to_lag_domain(R_xx, R_xc, g1 + g2, 8, 4, ear=1).r_xy
    np.testing.assert_allclose(c, a + b, atol=1e-12)


def test_lag_errors():
    R_xx = np.tile(np.eye(2), (9, 1, 1)) + 0j
    with pytest.raises(ValueError):
        to_lag_domain(R_xx, np.zeros((1, 9, 2, 2)), [1.0], order=8, delay=0)  # fft 16 < 18
    with pytest.raises(ValueError):
        to_lag_domain(R_xx, np.zeros((1, 9, 2, 2)), [-1.0], order=2, delay=0)
    with pytest.raises(ValueError):
        to_lag_domain(R_xx, np.zeros((1, 9, 2, 2)), [1.0], order=2, delay=3)
    with pytest.raises(ValueError):
        to_lag_domain(R_xx, np.zeros((1, 9, 2, 2)), [1.0, 1.0], order=2, delay=1)


def residual_min_eig(st_):
    resid = st_.R_xx.copy()
    for n in range(st_.n_sources):
        resid -= np.einsum("fm,fk->fmk", st_.R_xs[n], st_.R_xs[n].conj()) / st_.R_ss[n][:, None, None]
    tr = np.real(np.trace(st_.R_xx, axis1=1, axis2=2))
    return np.linalg.eigvalsh(resid)[:, 0] / tr


def test_residual_covariance_psd_long_average():
    # sample cross-correlation between the sources decays like 1/sqrt(frames); ~1e6 frames are needed
    st_, *_ = white_stats(M=3, N=2, T=8_000_000, frame=16, noise=0.01)
    assert st_.n_frames > 900_000
    assert np.all(residual_min_eig(st_) > -1e-3)


def test_residual_covariance_psd_disjoint_sources():
    # sources active in frames that never overlap are exactly uncorrelated, so the residual is a
    # Schur complement of the joint sample covariance
    rng = np.random.default_rng(3)
    T, frame = 40000, 256
    s = np.zeros((2, T))
    s[0, :18000] = rng.standard_normal(18000)
    s[1, 22000:] = rng.standard_normal(18000)
    h = rng.standard_normal((2, 3, 4))
    x = sum(np.stack([np.convolve(s[n], h[n, m])[:T] for m in range(3)]) for n in range(2))
    st_ = estimate_spectra(stft(x, frame, frame // 2), stft(s, frame, frame // 2))
    assert np.all(residual_min_eig(st_) > -1e-10)


def test_estimator_and_sidecar(tmp_path):
    rng = np.random.default_rng(10)
    x, s = rng.standard_normal((2, 20000)), rng.standard_normal((1, 20000))
    est = SpatialStatsEstimator(frame_len=512, hop=256, fft_len=1024).fit(x, s, sample_rate=16000)
    st_ = est.transform()
    assert st_.R_xx.shape == (513, 2, 2) and st_.sample_rate == 16000
    save_stats(tmp_path / "s.bin", st_, {"listener": "a"})
    back, meta = load_stats(tmp_path / "s.bin")
    assert meta["listener"] == "a" and back.n_frames == st_.n_frames
    np.testing.assert_array_equal(back.R_xs, st_.R_xs)
    with pytest.raises(ValueError):
        SpatialStatsEstimator(512, 256, 1024).fit(x, s[:, :100])
