"""Time-domain and time-frequency primitives.

Signals are stored as ``(channels, samples)`` float arrays. The STFT uses a
periodic sqrt-Hann window for both analysis and synthesis, so at 50% overlap
the squared window overlap-adds to one and ``istft(stft(x))`` is exact on
every sample covered by a full set of overlapping frames.

Frames are cut from the un-padded signal: frame ``i`` covers samples
``[i*hop, i*hop + frame_len)`` and trailing samples that do not fill a frame
are dropped. Callers that need the signal edges reconstructed should pad
before analysis (the separators do this internally).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_signal


class ConfigurationError(ValueError):
    """Raised for inconsistent transform parameters (e.g. a non-COLA hop)."""


@dataclass(frozen=True)
class MultichannelSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.array(check_signal(self.samples, name="samples"), copy=True)
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        sr = check_positive_int(self.sample_rate, "sample_rate")
        object.__setattr__(self, "sample_rate", sr)

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.sample_rate

    def select(self, channels):
        return MultichannelSignal(self.samples[np.atleast_1d(channels)], self.sample_rate)

    def segment(self, start, stop):
        return MultichannelSignal(self.samples[:, start:stop], self.sample_rate)


def make_window(name, frame_len):
    """Periodic analysis window of the given family."""
    frame_len = check_positive_int(frame_len, "frame_len")
    if name == "sqrt_hann":
        n = np.arange(frame_len)
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / frame_len))
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(frame_len)
    raise ConfigurationError(f"unknown window {name!r}")


def cola_constant(window, hop, rtol=1e-10):
    """Overlap-added value of ``window**2`` at ``hop``; raise if not constant."""
    frame_len = len(window)
    if not 0 < hop <= frame_len:
        raise ConfigurationError(f"hop must satisfy 0 < hop <= frame_len, got hop={hop}")
    n_over = -(-frame_len // hop)
    n_frames = 2 * n_over + 1
    acc = np.zeros((n_frames - 1) * hop + frame_len)
    w2 = window**2
    for i in range(n_frames):
        acc[i * hop : i * hop + frame_len] += w2
    steady = acc[n_over * hop : (n_over + 1) * hop]
    const = steady.mean()
    if const <= 0 or np.max(np.abs(steady - const)) > rtol * const:
        raise ConfigurationError(
            f"window/hop pair is not constant-overlap-add (hop={hop}, frame_len={frame_len})"
        )
    return float(const)


@dataclass(frozen=True)
class StftTensor:
    coeffs: np.ndarray  # (channels, frames, bins)
    frame_len: int
    hop: int
    analysis_window: np.ndarray
    fft_len: int
    sample_rate: int = 1
    n_samples: int = 0  # length of the analysed signal

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        if c.ndim != 3:
            raise ValueError("coeffs must have shape (channels, frames, bins)")
        if c.shape[2] != self.fft_len // 2 + 1:
            raise ValueError(f"bins {c.shape[2]} != fft_len/2+1 for fft_len={self.fft_len}")
        if len(self.analysis_window) != self.frame_len or self.frame_len > self.fft_len:
            raise ValueError("inconsistent frame_len / window / fft_len metadata")

    @property
    def n_channels(self):
        return self.coeffs.shape[0]

    @property
    def n_frames(self):
        return self.coeffs.shape[1]

    @property
    def n_bins(self):
        return self.coeffs.shape[2]

    def with_coeffs(self, coeffs):
        return StftTensor(
            coeffs, self.frame_len, self.hop, self.analysis_window, self.fft_len,
            self.sample_rate, self.n_samples,
        )


def n_frames_for(n_samples, frame_len, hop):
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def interior(n_frames, frame_len, hop):
    """Sample range reconstructed exactly by ``istft`` (full frame overlap)."""
    return slice(frame_len - hop, (n_frames - 1) * hop + hop)


def stft(signal, frame_len, hop, fft_len=None, window="sqrt_hann"):
    """Short-time Fourier transform of every channel.

    ``signal`` is a ``MultichannelSignal`` or a ``(channels, samples)`` array.
    Returns a ``StftTensor`` with one-sided spectra.
    """
    sr = getattr(signal, "sample_rate", 1)
    x = check_signal(signal, name="signal")
    frame_len = check_positive_int(frame_len, "frame_len")
    hop = check_positive_int(hop, "hop")
    fft_len = frame_len if fft_len is None else check_positive_int(fft_len, "fft_len")
    if frame_len > fft_len:
        raise ConfigurationError("frame_len must not exceed fft_len")
    win = window if isinstance(window, np.ndarray) else make_window(window, frame_len)
    cola_constant(win, hop)
    n_frames = n_frames_for(x.shape[1], frame_len, hop)
    if n_frames == 0:
        raise ValueError(f"signal shorter than one frame ({x.shape[1]} < {frame_len})")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=1)[:, ::hop][:, :n_frames]
    coeffs = np.fft.rfft(frames * win, n=fft_len, axis=-1)
    return StftTensor(coeffs, frame_len, hop, win, fft_len, sr, x.shape[1])


def istft(tensor, target_len=None):
    """Weighted overlap-add inverse of :func:`stft`.

    Output samples outside the analysed frames are zero; samples in
    :func:`interior` are exact.
    """
    if not isinstance(tensor, StftTensor):
        raise TypeError("istft expects a StftTensor")
    win = np.asarray(tensor.analysis_window)
    const = cola_constant(win, tensor.hop)
    L, H = tensor.frame_len, tensor.hop
    frames = np.fft.irfft(tensor.coeffs, n=tensor.fft_len, axis=-1)[..., :L] * win
    n_ch, n_frames = frames.shape[:2]
    length = (n_frames - 1) * H + L
    out = np.zeros((n_ch, length))
    for i in range(n_frames):
        out[:, i * H : i * H + L] += frames[:, i]
    out /= const
    if target_len is None:
        target_len = max(tensor.n_samples, length)
    if target_len > length:
        out = np.pad(out, ((0, 0), (0, target_len - length)))
    out = out[:, :target_len]
    return MultichannelSignal(out, tensor.sample_rate)


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray  # (channels, K+1)
    declared_delay: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        taps = np.array(self.taps, dtype=float, copy=True)
        if taps.ndim == 1:
            taps = taps[None, :]
        if taps.ndim != 2 or taps.shape[1] < 1:
            raise ValueError("taps must have shape (channels, K+1)")
        if not np.all(np.isfinite(taps)):
            raise ValueError("taps must be finite")
        if not 0 <= self.declared_delay <= taps.shape[1] - 1:
            raise ValueError(f"declared_delay {self.declared_delay} outside [0, K={taps.shape[1] - 1}]")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def order(self):
        return self.taps.shape[1] - 1

    @property
    def n_channels(self):
        return self.taps.shape[0]


def fir_apply(filt, signal):
    """Causal multichannel FIR filter-and-sum, truncated to the input length."""
    taps = filt.taps if isinstance(filt, FirFilter) else np.atleast_2d(np.asarray(filt, float))
    x = check_signal(signal, name="signal")
    if taps.shape[0] != x.shape[0]:
        raise ValueError(f"filter has {taps.shape[0]} channels but signal has {x.shape[0]}")
    T = x.shape[1]
    y = fftconvolve(x, taps, axes=-1)[:, :T].sum(axis=0)
    if isinstance(signal, MultichannelSignal):
        return MultichannelSignal(y[None, :], signal.sample_rate)
    return y


class ShortTimeFourierTransform(TransformerMixin, BaseEstimator):
    """STFT as a transformer: ``transform`` maps (channels, samples) to
    (channels, frames, bins) coefficients and ``inverse_transform`` goes back.
    """

    def __init__(self, frame_len=1024, hop=512, fft_len=None, window="sqrt_hann"):
        self.frame_len = frame_len
        self.hop = hop
        self.fft_len = fft_len
        self.window = window

    def fit(self, X=None, y=None):
        self.window_ = make_window(self.window, self.frame_len)
        self.cola_ = cola_constant(self.window_, self.hop)
        self.fft_len_ = self.frame_len if self.fft_len is None else self.fft_len
        if self.fft_len_ < self.frame_len:
            raise ConfigurationError("fft_len must be >= frame_len")
        return self

    def transform(self, X):
        check_is_fitted(self, "window_")
        self.last_length_ = check_signal(X).shape[1]
        return stft(X, self.frame_len, self.hop, self.fft_len_, self.window_).coeffs

    def inverse_transform(self, coeffs, length=None):
        check_is_fitted(self, "window_")
        coeffs = np.asarray(coeffs)
        if coeffs.ndim == 2:
            coeffs = coeffs[None]
        t = StftTensor(coeffs, self.frame_len, self.hop, self.window_, self.fft_len_)
        return istft(t, length).samples
