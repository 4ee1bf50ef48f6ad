"""Second-order statistics a listening device needs to design its filters.

From the local microphone STFT ``X`` and the separated reference estimates
``S_n`` (same frame grid) this module computes periodogram spectra, relative
transfer functions ``R_xs / R_ss``, their time-windowed early parts (REIRs),
the mixture-to-early-image cross-spectra and finally the lag-domain
correlations consumed by the time-domain Wiener filter design.

Lag convention: ``r_xx[k] = E[x[t] x[t-k]^T]`` and
``r_xy[k] = E[x[t] y[t-k]]``, i.e. the inverse DFT of ``mean X X^H`` and
``mean X Y^*``. Spectra are one-sided; lag-domain transforms rebuild the
negative frequencies by conjugate symmetry (``irfft``).
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_gains, check_positive_int, check_signal
from .io import read_sidecar, write_sidecar
from .signal import StftTensor, stft

RSS_FLOOR = 1e-8


@dataclass(frozen=True)
class SpatialStats:
    R_ss: np.ndarray  # (N, F) real
    R_xs: np.ndarray  # (N, F, M) complex
    R_xx: np.ndarray  # (F, M, M) complex Hermitian
    frame_len: int
    hop: int
    fft_len: int
    n_frames: int
    sample_rate: int = 1

    @property
    def n_sources(self):
        return self.R_ss.shape[0]

    @property
    def n_bins(self):
        return self.R_xx.shape[0]

    @property
    def n_mics(self):
        return self.R_xx.shape[1]


@dataclass(frozen=True)
class ReirEstimate:
    A_early: np.ndarray  # (N, F, M)
    pre_ms: float
    post_ms: float
    taper_ms: float
    time_support: tuple  # (first, last) lag in samples, inclusive


@dataclass(frozen=True)
class LagCorrelations:
    r_xx: np.ndarray  # (2K+1, M, M), entry i is lag i-K
    r_xy: np.ndarray  # (K+1, M), entry i is lag alpha-K+i
    order: int
    delay: int

    @property
    def n_mics(self):
        return self.r_xx.shape[1]

    def rxx_at(self, k):
        return self.r_xx[k + self.order]

    def rxy_at(self, k):
        return self.r_xy[k - (self.delay - self.order)]


def estimate_spectra(local_stft, estimates_stft):
    """Frame-averaged periodograms ``|S|^2``, ``X S^*`` and ``X X^H``."""
    X, S = local_stft, estimates_stft
    if not isinstance(X, StftTensor) or not isinstance(S, StftTensor):
        raise TypeError("estimate_spectra expects StftTensor inputs")
    if (X.frame_len, X.hop, X.fft_len, X.n_frames) != (S.frame_len, S.hop, S.fft_len, S.n_frames):
        raise ValueError("mixture and estimates must share the same frame grid")
    if X.n_frames < 2:
        raise ValueError("at least two frames are needed for a sample average")
    Xc, Sc = X.coeffs, S.coeffs  # (M, T, F), (N, T, F)
    T = X.n_frames
    R_ss = np.mean(np.abs(Sc) ** 2, axis=1)
    R_xs = np.einsum("mtf,ntf->nfm", Xc, Sc.conj(), optimize=True) / T
    R_xx = np.einsum("mtf,ktf->fmk", Xc, Xc.conj(), optimize=True) / T
    return SpatialStats(R_ss, R_xs, R_xx, X.frame_len, X.hop, X.fft_len, T, X.sample_rate)


def estimate_rtf(stats, floor=RSS_FLOOR):
    """Relative transfer functions ``R_xs / R_ss`` per source and bin.

    Bins where ``R_ss`` falls below ``floor`` times its mean are set to zero
    and reported in the returned ``active`` mask (N, F).
    """
    R_ss = stats.R_ss
    thresh = floor * R_ss.mean(axis=1, keepdims=True)
    active = (R_ss > thresh) & (R_ss > 0)
    silent = ~active.any(axis=1)
    if np.any(silent):
        raise ValueError(f"source(s) {np.flatnonzero(silent).tolist()} are silent in every bin")
    safe = np.where(active, R_ss, 1.0)
    rtf = np.where(active[..., None], stats.R_xs / safe[..., None], 0.0)
    return rtf, active


def lag_window(fft_len, pre, post, taper):
    """Circular lag window: one on lags [-pre, post], raised-cosine edges of ``taper`` lags outside."""
    if pre < 0 or post < 0 or taper < 0:
        raise ValueError("window lengths must be non-negative")
    if pre + post + 2 * taper + 1 > fft_len:
        raise ValueError(f"window ({pre + post + 2 * taper + 1} lags) longer than the fft support ({fft_len})")
    lags = np.arange(fft_len)
    lags = np.where(lags > fft_len // 2, lags - fft_len, lags)
    w = ((lags >= -pre) & (lags <= post)).astype(float)
    if taper > 0:
        ramp = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, taper + 1) / (taper + 1))
        for i, v in enumerate(ramp, start=1):
            w[(lags == post + i) | (lags == -pre - i)] = v
    return w


def window_reir(rtf, pre_ms=4.0, post_ms=32.0, sample_rate=16000, taper_ms=2.0):
    """Keep the part of each relative impulse response between ``-pre_ms`` and ``post_ms``."""
    rtf = np.asarray(rtf)
    n_bins = rtf.shape[-2]
    fft_len = 2 * (n_bins - 1)
    pre = int(round(pre_ms * sample_rate / 1000))
    post = int(round(post_ms * sample_rate / 1000))
    taper = int(round(taper_ms * sample_rate / 1000))
    if pre + post < 1:
        raise ValueError("window must span at least one sample")
    w = lag_window(fft_len, pre, post, taper)
    h = np.fft.irfft(rtf, n=fft_len, axis=-2)
    A = np.fft.rfft(h * w[:, None], n=fft_len, axis=-2)
    return ReirEstimate(A, pre_ms, post_ms, taper_ms, (-pre - taper, post + taper))


def cross_spectra(stats, reir):
    """Mixture-to-early-image cross-spectra ``R_xs A_early^H``, shape (N, F, M, M)."""
    A = reir.A_early if isinstance(reir, ReirEstimate) else np.asarray(reir)
    if A.shape != stats.R_xs.shape:
        raise ValueError(f"REIR shape {A.shape} does not match cross-spectra {stats.R_xs.shape}")
    return stats.R_xs[..., :, None] * A.conj()[..., None, :]


def to_lag_domain(R_xx, R_xc, gains, order, delay, ear=0):
    """Lag-domain correlations for a filter of ``order`` taps-1 and ``delay`` samples.

    ``R_xc`` is (N, F, M, M); the desired signal is ``sum_n g_n`` times the
    early image of source ``n`` at local channel ``ear``.
    """
    R_xx = np.asarray(R_xx)
    R_xc = np.asarray(R_xc)
    g = check_gains(gains)
    K = check_positive_int(order, "order", minimum=0)
    alpha = int(delay)
    if not 0 <= alpha <= K:
        raise ValueError(f"delay {alpha} must lie in [0, {K}]")
    if g.size != R_xc.shape[0]:
        raise ValueError(f"{g.size} gains for {R_xc.shape[0]} sources")
    fft_len = 2 * (R_xx.shape[0] - 1)
    if fft_len < 2 * K + 2:
        raise ValueError(f"fft_len {fft_len} too short for order {K} (needs >= {2 * K + 2})")
    r_full = np.fft.irfft(R_xx, n=fft_len, axis=0)
    r_xx = r_full[np.arange(-K, K + 1) % fft_len]
    R_xy = np.einsum("n,nfm->fm", g, R_xc[..., :, ear])
    y_full = np.fft.irfft(R_xy, n=fft_len, axis=0)
    r_xy = y_full[np.arange(alpha - K, alpha + 1) % fft_len]
    return LagCorrelations(r_xx, r_xy, K, alpha)


class SpatialStatsEstimator(BaseEstimator):
    """``fit(X_local, S_hat)`` computes ``stats_`` from time-domain signals."""

    def __init__(self, frame_len=4096, hop=2048, fft_len=8192, window="sqrt_hann"):
        self.frame_len = frame_len
        self.hop = hop
        self.fft_len = fft_len
        self.window = window

    def fit(self, X, y, sample_rate=1):
        X = check_signal(X)
        S = check_signal(y, name="estimates")
        if X.shape[1] != S.shape[1]:
            raise ValueError("mixture and estimates must have equal length")
        tx = stft(X, self.frame_len, self.hop, self.fft_len, self.window)
        ts = stft(S, self.frame_len, self.hop, self.fft_len, self.window)
        st = estimate_spectra(tx, ts)
        self.stats_ = SpatialStats(st.R_ss, st.R_xs, st.R_xx, st.frame_len, st.hop, st.fft_len,
                                   st.n_frames, int(sample_rate))
        return self

    def transform(self, X=None):
        check_is_fitted(self, "stats_")
        return self.stats_


def save_stats(path, stats, meta=None):
    meta = dict(meta or {})
    meta.update(frame_len=stats.frame_len, hop=stats.hop, fft_len=stats.fft_len,
                n_frames=stats.n_frames, sample_rate=stats.sample_rate)
    write_sidecar(path, "spatial-stats", {"R_ss": stats.R_ss, "R_xs": stats.R_xs, "R_xx": stats.R_xx}, meta)


def load_stats(path):
    arrays, meta = read_sidecar(path, "spatial-stats")
    stats = SpatialStats(arrays["R_ss"], arrays["R_xs"], arrays["R_xx"], int(meta["frame_len"]),
                         int(meta["hop"]), int(meta["fft_len"]), int(meta["n_frames"]),
                         int(meta["sample_rate"]))
    return stats, meta
