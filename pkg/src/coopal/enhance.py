"""Delay-constrained time-domain multichannel Wiener remixing filters.

A filter ``w[0..K]`` over the local microphones estimates the desired
signal ``y[t - delay]`` from ``x[t], ..., x[t-K]``. Its stacked taps solve
the block-Toeplitz normal equations

    sum_k r_xx[k - j] w[k] = r_xy[delay - j],   j = 0..K

built from lag-domain correlations. The system is positive semidefinite in
theory; sample estimates can be rank deficient, so the solver escalates
diagonal loading until a Cholesky factorisation succeeds and the relative
residual is below ``RESIDUAL_TOL``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_gains, check_positive_int, check_signal
from .io import read_sidecar, write_sidecar
from .signal import FirFilter, fir_apply
from .stats import cross_spectra, estimate_rtf, to_lag_domain, window_reir

LOADING_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)
RESIDUAL_TOL = 1e-6
MAX_UNKNOWNS = 65536
EARS = ("left", "right")


class MwfDesignError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RemixSpec:
    gains: tuple
    delay: int
    order: int
    ear: str = "left"

    def __post_init__(self):
        g = check_gains(self.gains)
        if not np.any(g > 0):
            raise ValueError("at least one gain must be positive")
        object.__setattr__(self, "gains", tuple(float(v) for v in g))
        check_positive_int(self.order, "order", minimum=0)
        if not 0 <= self.delay <= self.order:
            raise ValueError(f"delay {self.delay} must lie in [0, order={self.order}]")
        if self.ear not in EARS:
            raise ValueError(f"ear must be one of {EARS}")


@dataclass(frozen=True)
class MwfSolution:
    filter: FirFilter
    residual_norm: float
    loading: float


def block_toeplitz(r_xx, order):
    """Dense ``(K+1)M`` square matrix with block (j, k) equal to ``r_xx[k - j]``."""
    K = order
    M = r_xx.shape[1]
    A = np.empty(((K + 1) * M, (K + 1) * M))
    for j in range(K + 1):
        # blocks r_xx[k - j] for k = 0..K are rows K-j .. 2K-j of r_xx
        blk = r_xx[K - j : 2 * K + 1 - j]
        A[j * M : (j + 1) * M] = blk.transpose(1, 0, 2).reshape(M, (K + 1) * M)
    return A


def block_toeplitz_matvec(r_xx, w):
    """``A @ w`` for the block-Toeplitz matrix without forming it (FFT correlation)."""
    L, M, _ = r_xx.shape
    K = (L - 1) // 2
    W = w.reshape(K + 1, M)
    n = int(2 ** np.ceil(np.log2(L + K + 1)))
    # y[j] = sum_k r[k - j] W[k]  ->  correlation; with s = k - j in [-K, K]
    Rf = np.fft.rfft(r_xx[::-1], n=n, axis=0)  # reversed: index K - s
    Wf = np.fft.rfft(W, n=n, axis=0)
    full = np.fft.irfft(np.einsum("fab,fb->fa", Rf, Wf), n=n, axis=0)
    # full[p] = sum_k r_rev[p - k] W[k] = sum_k r[2K - p + k ... ]; r_rev[i] = r_xx[2K - i] -> lag K - i
    # lag(k - j) = K - (p - k)  =>  p = K + j
    return full[K : 2 * K + 1].reshape(-1)


class BlockToeplitzSolver:
    """Factorises the normal-equation matrix once and solves many right-hand sides."""

    def __init__(self, r_xx, order, schedule=LOADING_SCHEDULE, tol=RESIDUAL_TOL):
        self.r_xx = np.asarray(r_xx, dtype=float)
        self.order = int(order)
        M = self.r_xx.shape[1]
        if self.r_xx.shape != (2 * self.order + 1, M, M):
            raise ValueError("r_xx must hold lags -K..K")
        if (self.order + 1) * M > MAX_UNKNOWNS:
            raise ValueError(f"{(self.order + 1) * M} unknowns exceed the cap of {MAX_UNKNOWNS}")
        self.schedule = tuple(schedule)
        self.tol = tol
        self.scale = float(np.mean(np.diagonal(self.r_xx[self.order])))
        self._factors = {}

    def _factor(self, delta):
        if delta not in self._factors:
            A = block_toeplitz(self.r_xx, self.order)
            A[np.diag_indices_from(A)] += delta * self.scale
            try:
                self._factors[delta] = scipy.linalg.cho_factor(A, lower=False, overwrite_a=True, check_finite=False)
            except np.linalg.LinAlgError:
                self._factors[delta] = None
        return self._factors[delta]

    def residual(self, w, b, delta):
        r = block_toeplitz_matvec(self.r_xx, w) + delta * self.scale * w - b
        nb = np.linalg.norm(b)
        return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))

    def solve(self, b):
        """Return ``(w, residual_norm, loading)`` for the stacked right-hand side ``b``."""
        b = np.asarray(b, dtype=float)
        if not np.any(b):
            return np.zeros_like(b), 0.0, 0.0
        last = None
        for delta in self.schedule:
            fac = self._factor(delta)
            if fac is None:
                last = f"Cholesky failed at loading {delta:g}"
                continue
            w = scipy.linalg.cho_solve(fac, b, check_finite=False)
            res = self.residual(w, b, delta)
            if np.all(np.isfinite(w)) and res < self.tol:
                return w, res, delta * self.scale
            last = f"residual {res:.3g} at loading {delta:g}"
        diag = np.diagonal(self.r_xx[self.order])
        raise MwfDesignError(
            f"normal equations unsolved after loading schedule {self.schedule}: {last}; "
            f"r_xx[0] diagonal range [{diag.min():.3g}, {diag.max():.3g}]"
        )


def _rhs(corr):
    # row j holds r_xy[delay - j]; r_xy is stored for ascending lags delay-K..delay
    return corr.r_xy[::-1].reshape(-1)


def design_mwf(corr, spec=None, solver=None):
    """Solve for the delay-constrained multichannel Wiener filter.

    ``solver`` may be a :class:`BlockToeplitzSolver` built from the same
    ``r_xx`` to reuse its factorisation across targets.
    """
    K, alpha = corr.order, corr.delay
    if spec is not None and (spec.order != K or spec.delay != alpha):
        raise ValueError("RemixSpec order/delay do not match the correlations")
    if solver is None:
        solver = BlockToeplitzSolver(corr.r_xx, K)
    elif solver.order != K:
        raise ValueError("solver order does not match the correlations")
    w, res, load = solver.solve(_rhs(corr))
    taps = w.reshape(K + 1, corr.n_mics).T
    return MwfSolution(FirFilter(taps, alpha), res, load)


def design_from_stats(stats, spec, ear_channels, reir_ms=(4.0, 32.0, 2.0), floor=None, solver=None):
    """Filter for one ear from spatial statistics: RTF -> REIR -> cross-spectra -> lags -> solve."""
    kw = {} if floor is None else {"floor": floor}
    rtf, _ = estimate_rtf(stats, **kw)
    pre, post, taper = reir_ms
    reir = window_reir(rtf, pre, post, stats.sample_rate, taper)
    R_xc = cross_spectra(stats, reir)
    ear = ear_channels[EARS.index(spec.ear)]
    corr = to_lag_domain(stats.R_xx, R_xc, spec.gains, spec.order, spec.delay, ear)
    return design_mwf(corr, spec, solver)


class DelayConstrainedMWF(BaseEstimator):
    """Wiener filter estimator: ``fit(corr)`` then ``predict(X_local)``."""

    def __init__(self, order=2047, delay=256, loading_schedule=LOADING_SCHEDULE):
        self.order = order
        self.delay = delay
        self.loading_schedule = loading_schedule

    def fit(self, corr, y=None):
        if corr.order != self.order or corr.delay != self.delay:
            raise ValueError("correlations were computed for a different order/delay")
        solver = BlockToeplitzSolver(corr.r_xx, self.order, self.loading_schedule)
        sol = design_mwf(corr, solver=solver)
        self.filter_ = sol.filter
        self.residual_norm_ = sol.residual_norm
        self.loading_ = sol.loading
        return self

    def predict(self, X):
        check_is_fitted(self, "filter_")
        return fir_apply(self.filter_, check_signal(X))


class BinauralRemixer(BaseEstimator):
    """Left and right filters sharing one gain vector, designed from ``SpatialStats``.

    Applying the same per-source gains at both ears keeps each source's
    interaural level and time differences in the output.
    """

    def __init__(self, gains=(1.0,), delay=256, order=2047, ear_channels=(0, 1),
                 reir_pre_ms=4.0, reir_post_ms=32.0, reir_taper_ms=2.0):
        self.gains = gains
        self.delay = delay
        self.order = order
        self.ear_channels = ear_channels
        self.reir_pre_ms = reir_pre_ms
        self.reir_post_ms = reir_post_ms
        self.reir_taper_ms = reir_taper_ms

    def fit(self, stats, y=None, solver=None):
        if solver is None:
            corr0 = to_lag_domain(stats.R_xx, np.zeros(stats.R_xs.shape + (stats.n_mics,)),
                                  np.ones(stats.n_sources), self.order, self.delay)
            solver = BlockToeplitzSolver(corr0.r_xx, self.order)
        self.solutions_ = {}
        for ear in EARS:
            spec = RemixSpec(tuple(self.gains), self.delay, self.order, ear)
            self.solutions_[ear] = design_from_stats(
                stats, spec, self.ear_channels,
                (self.reir_pre_ms, self.reir_post_ms, self.reir_taper_ms), solver=solver,
            )
        self.filters_ = {ear: s.filter for ear, s in self.solutions_.items()}
        return self

    def predict(self, X):
        check_is_fitted(self, "filters_")
        X = check_signal(X)
        return np.stack([fir_apply(self.filters_[ear], X) for ear in EARS])


def remix_targets(rendered, spec, listener):
    """Ground-truth desired output: gain-weighted early images at one ear, delayed by ``spec.delay``.

    ``listener`` is a listener device name in ``rendered.scene`` or a global
    ``(left, right)`` microphone pair.
    """
    if isinstance(listener, str):
        pair = rendered.scene.ear_channels(listener)
    else:
        pair = tuple(int(i) for i in listener)
    mic = pair[EARS.index(spec.ear)]
    g = np.asarray(spec.gains, dtype=float)
    if g.size != rendered.n_sources:
        raise ValueError(f"{g.size} gains for {rendered.n_sources} sources")
    y = np.einsum("n,nt->t", g, rendered.early_images[:, mic, :])
    out = np.zeros_like(y)
    if spec.delay < len(y):
        out[spec.delay :] = y[: len(y) - spec.delay]
    return out


def enhance(listener_mixture, stats_file, spec, ear_channels=None, reir_ms=(4.0, 32.0, 2.0)):
    """Design both ear filters from a stats sidecar and filter the local mixture.

    Returns an array (2, T): left and right outputs.
    """
    from .stats import load_stats

    stats, meta = load_stats(stats_file)
    x = check_signal(listener_mixture)
    if x.shape[0] != stats.n_mics:
        raise ValueError(f"mixture has {x.shape[0]} channels but statistics describe {stats.n_mics}")
    ears = ear_channels if ear_channels is not None else tuple(meta.get("ear_channels", (0, 1)))
    remixer = BinauralRemixer(spec.gains, spec.delay, spec.order, ears, *reir_ms).fit(stats)
    return remixer.predict(x)


def save_filters(path, taps, meta=None):
    """Filter bank sidecar; ``taps`` is any array whose last two axes are (channels, K+1)."""
    write_sidecar(path, "fir-filters", {"taps": np.asarray(taps, dtype=float)}, meta)


def load_filters(path):
    arrays, meta = read_sidecar(path, "fir-filters")
    return arrays["taps"], meta
