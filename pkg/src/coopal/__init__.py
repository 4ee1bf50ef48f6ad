"""Cooperative listening: array-assisted separation and binaural Wiener remixing."""

__version__ = "0.1.0"

from .enhance import BinauralRemixer, DelayConstrainedMWF, RemixSpec, design_mwf, enhance, remix_targets
from .metrics import output_snr, snr_improvement, summarize
from .room import Scene, default_scene, render, simulate_rirs, source_signals
from .separation import AuxIVA, IdealMMSESeparator, NearestMicSeparator
from .signal import FirFilter, MultichannelSignal, ShortTimeFourierTransform, istft, stft
from .stats import SpatialStatsEstimator, estimate_spectra, to_lag_domain

__all__ = [
    "AuxIVA", "BinauralRemixer", "DelayConstrainedMWF", "FirFilter", "IdealMMSESeparator",
    "MultichannelSignal", "NearestMicSeparator", "RemixSpec", "Scene", "ShortTimeFourierTransform",
    "SpatialStatsEstimator", "default_scene", "design_mwf", "enhance", "estimate_spectra", "istft",
    "output_snr", "remix_targets", "render", "simulate_rirs", "snr_improvement", "source_signals", "stft", "summarize",
    "to_lag_domain",
]
