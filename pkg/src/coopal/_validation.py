"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np


def check_signal(x, name="X", ensure_2d=True, allow_complex=False):
    """Return ``x`` as a finite float64 array of shape (channels, samples).

    A 1-D input is promoted to a single channel when ``ensure_2d`` is set.
    Objects carrying a ``samples`` attribute (``MultichannelSignal``) are
    unwrapped.
    """
    x = getattr(x, "samples", x)
    dtype = np.complex128 if allow_complex else np.float64
    x = np.asarray(x, dtype=dtype)
    if ensure_2d:
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ValueError(f"{name} must be 1-D or 2-D (channels, samples), got shape {x.shape}")
    if x.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    return x


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_indices(indices, n, name="indices"):
    idx = np.asarray(indices, dtype=int).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"{name} out of range for {n} channels: {idx.tolist()}")
    return idx


def check_gains(gains):
    g = np.asarray(gains, dtype=float).ravel()
    if g.size == 0:
        raise ValueError("gains must not be empty")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("gains must be finite and non-negative")
    return g


def ms_to_samples(ms, sample_rate):
    return int(round(ms * sample_rate / 1000.0))
