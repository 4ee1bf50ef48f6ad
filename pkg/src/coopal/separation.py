"""Estimate each source as heard at its reference microphone.

Three separators share the ``fit``/``transform`` interface. All of them are
linear once fitted, so ``transform`` applied to one source image yields that
source's contribution to every estimate; the metrics use this to split an
estimate into target and interference.

``NearestMicSeparator``
    the mixture at each source's reference microphone, unmodified.
``AuxIVA``
    frequency-domain independent vector analysis with auxiliary-function
    (iterative projection) updates and a spherical Laplacian source model.
``IdealMMSESeparator``
    per-frequency linear MMSE filter computed from ground-truth images.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_indices, check_positive_int, check_signal
from .signal import istft, stft


@dataclass
class SeparationResult:
    estimates: np.ndarray  # (N, T)
    method: str
    reference_mics: np.ndarray  # global microphone index per source
    channels: np.ndarray  # global microphones the separator used
    separator: object = None
    per_source_snr: np.ndarray = None
    unprocessed_snr: np.ndarray = None
    report: dict = field(default_factory=dict)

    @property
    def per_source_improvement(self):
        if self.per_source_snr is None:
            return None
        return self.per_source_snr - self.unprocessed_snr


class NearestMicSeparator(TransformerMixin, BaseEstimator):
    """Baseline: output ``n`` is input channel ``reference_mics[n]``."""

    def __init__(self, reference_mics=None):
        self.reference_mics = reference_mics

    def fit(self, X, y=None):
        X = check_signal(X)
        self.reference_mics_ = check_indices(self.reference_mics, X.shape[0], "reference_mics")
        self.n_features_in_ = X.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_mics_")
        X = check_signal(X)
        if X.shape[0] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} channels, got {X.shape[0]}")
        return X[self.reference_mics_].copy()


class _FrequencyDomainSeparator(TransformerMixin, BaseEstimator):
    """Shared STFT plumbing; subclasses set ``demix_`` of shape (N, F, M)."""

    def _analyse(self, X):
        # pad a full frame on both sides so every input sample is interior
        pad = self.frame_len
        Xp = np.pad(X, ((0, 0), (pad, pad + self.hop)))
        return stft(Xp, self.frame_len, self.hop, self.frame_len, self.window)

    def _synthesise(self, coeffs, like, T):
        y = istft(like.with_coeffs(coeffs), like.n_samples).samples
        return y[:, self.frame_len : self.frame_len + T]

    def transform(self, X):
        check_is_fitted(self, "demix_")
        X = check_signal(X)
        if X.shape[0] != self.demix_.shape[2]:
            raise ValueError(f"expected {self.demix_.shape[2]} channels, got {X.shape[0]}")
        tf = self._analyse(X)
        # (N, F, M) x (M, T, F) -> (N, T, F)
        Y = np.einsum("nfm,mtf->ntf", self.demix_, tf.coeffs, optimize=True)
        return self._synthesise(Y, tf, X.shape[1])


class IdealMMSESeparator(_FrequencyDomainSeparator):
    """Oracle per-frequency MMSE filters ``R_xx^{-1} r_x,target``.

    ``fit(X, y)`` takes the mixture ``X`` (M, T) and the targets ``y``
    (N, T): each source's true image at its reference microphone.
    ``loading`` is diagonal loading relative to the mean input power per bin.
    """

    def __init__(self, frame_len=2048, hop=1024, window="sqrt_hann", loading=1e-6):
        self.frame_len = frame_len
        self.hop = hop
        self.window = window
        self.loading = loading

    def fit(self, X, y):
        X = check_signal(X)
        y = check_signal(y, name="y")
        if y.shape[1] != X.shape[1]:
            raise ValueError("targets and mixture must have equal length")
        Xf = self._analyse(X).coeffs  # (M, T, F)
        Sf = self._analyse(y).coeffs  # (N, T, F)
        n_frames = Xf.shape[1]
        Rxx = np.einsum("mtf,ktf->fmk", Xf, Xf.conj(), optimize=True) / n_frames
        rxs = np.einsum("mtf,ntf->nfm", Xf, Sf.conj(), optimize=True) / n_frames
        M = X.shape[0]
        load = self.loading * np.real(np.trace(Rxx, axis1=1, axis2=2)) / M
        load = np.maximum(load, np.finfo(float).tiny)
        Rl = Rxx + load[:, None, None] * np.eye(M)
        w = np.linalg.solve(Rl[None], rxs[..., None])[..., 0]  # (N, F, M)
        self.demix_ = w.conj()
        self.n_features_in_ = M
        return self


class AuxIVA(_FrequencyDomainSeparator):
    """Auxiliary-function IVA with projection back to reference microphones.

    When there are more input channels than sources, each bin is first
    reduced to its ``n_sources`` principal components. The demixing matrix
    starts at the rows of the PCA basis that reproduce each reference
    microphone, so before any update output ``n`` is (the principal part of)
    the reference mixture for source ``n``.

    Each sweep updates every source once:

    * ``r_n[t] = sqrt(sum_f |y_n[t, f]|^2)``
    * ``V_n[f] = mean_t z z^H / r_n``
    * ``w_n <- (W V_n)^{-1} e_n``, then ``w_n <- w_n / sqrt(w_n^H V_n w_n)``

    which never increases ``sum_n mean_t r_n - sum_f log|det W_f|``
    (``objective_`` records it per sweep).
    """

    def __init__(self, reference_mics=None, frame_len=2048, hop=1024, max_iter=100, tol=1e-6,
                 eps=1e-10, window="sqrt_hann"):
        self.reference_mics = reference_mics
        self.frame_len = frame_len
        self.hop = hop
        self.max_iter = max_iter
        self.tol = tol
        self.eps = eps
        self.window = window

    @staticmethod
    def objective(W, Y):
        """``sum_n mean_t r_n[t] - sum_f log|det W_f|`` for W (F, N, N), Y (F, N, T)."""
        r = np.sqrt(np.sum(np.abs(Y) ** 2, axis=0))  # (N, T)
        logdet = np.linalg.slogdet(W)[1].sum()
        return float(r.mean(axis=1).sum() - logdet)

    def fit(self, X, y=None):
        X = check_signal(X)
        M = X.shape[0]
        refs = check_indices(self.reference_mics, M, "reference_mics")
        N = len(refs)
        if N < 2:
            raise ValueError("AuxIVA needs at least two sources")
        if N > M:
            raise ValueError("more sources than channels")
        check_positive_int(self.max_iter, "max_iter", minimum=0)
        Xf = self._analyse(X).coeffs.transpose(2, 0, 1)  # (F, M, T)
        F, _, T = Xf.shape

        # PCA to N dimensions per bin
        Rxx = Xf @ Xf.conj().transpose(0, 2, 1) / T
        _, vecs = np.linalg.eigh(Rxx)
        U = vecs[:, :, ::-1][:, :, :N]  # (F, M, N) principal basis
        Z = U.conj().transpose(0, 2, 1) @ Xf  # (F, N, T)
        W = U[:, refs, :].copy()  # x_ref ~ U[ref] z

        bad = np.abs(np.linalg.det(W)) < 1e-12 * np.abs(W).max(axis=(1, 2)) ** N
        W[bad] = np.eye(N)
        eye = np.eye(N)
        reg_events = 0
        Y = W @ Z
        history = [self.objective(W, Y)]
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            for n in range(N):
                r = np.sqrt(np.sum(np.abs(Y[:, n, :]) ** 2, axis=0))  # (T,)
                r = np.maximum(r, self.eps)
                V = (Z / r) @ Z.conj().transpose(0, 2, 1) / T  # (F, N, N)
                ev = np.linalg.eigvalsh(V)
                sing = ev[:, 0] < self.eps * ev[:, -1]
                if np.any(sing):
                    reg_events += int(sing.sum())
                    tr = np.real(np.trace(V[sing], axis1=1, axis2=2))
                    V[sing] += self.eps * tr[:, None, None] * eye
                w = np.linalg.solve(W @ V, np.broadcast_to(eye[:, n], (F, N))[..., None])[..., 0]
                norm = np.sqrt(np.real(np.einsum("fi,fij,fj->f", w.conj(), V, w)))
                w = w / norm[:, None]
                W[:, n, :] = w.conj()
                Y[:, n, :] = np.einsum("fm,fmt->ft", W[:, n, :], Z)
            history.append(self.objective(W, Y))
            if abs(history[-2] - history[-1]) <= self.tol * abs(history[-1]):
                break

        # order outputs by envelope correlation with the reference channels
        env_y = _normalised_envelope(Y.transpose(1, 2, 0))
        env_x = _normalised_envelope(Xf[:, refs, :].transpose(1, 2, 0))
        corr = env_y @ env_x.T
        rows, cols = linear_sum_assignment(-corr)
        perm = np.empty(N, int)
        perm[cols] = rows
        W = W[:, perm, :]
        Y = Y[:, perm, :]

        # projection back: scale each output to best match its reference mic
        x_ref = Xf[:, refs, :]  # (F, N, T)
        num = np.sum(x_ref * Y.conj(), axis=2)
        den = np.maximum(np.sum(np.abs(Y) ** 2, axis=2), np.finfo(float).tiny)
        scale = num / den  # (F, N)
        D = scale[:, :, None] * (W @ U.conj().transpose(0, 2, 1))  # (F, N, M)
        self.demix_ = D.transpose(1, 0, 2)
        self.objective_ = np.array(history)
        self.n_iter_ = n_iter
        self.regularization_events_ = reg_events
        self.permutation_ = perm
        self.n_features_in_ = M
        return self


def _normalised_envelope(S):
    """(N, T, F) spectra -> (N, T) zero-mean unit-norm log-power envelopes."""
    p = np.abs(S) ** 2
    p = p / (p.mean(axis=1, keepdims=True) + 1e-30)
    e = np.log(p.mean(axis=2) + 1e-12)
    e = e - e.mean(axis=1, keepdims=True)
    return e / (np.linalg.norm(e, axis=1, keepdims=True) + 1e-30)


def auxiva_demix(X, n_iter=50, eps=1e-10):
    """Determined AuxIVA on an STFT array (channels, frames, bins).

    Identity initialisation, no PCA and no scale restoration. Returns the
    separated spectra (same shape) and the per-sweep objective values.
    """
    Xf = np.asarray(X).transpose(2, 0, 1)
    F, N, T = Xf.shape
    W = np.tile(np.eye(N, dtype=complex), (F, 1, 1))
    eye = np.eye(N)
    Y = W @ Xf
    history = [AuxIVA.objective(W, Y)]
    for _ in range(n_iter):
        for n in range(N):
            r = np.maximum(np.sqrt(np.sum(np.abs(Y[:, n, :]) ** 2, axis=0)), eps)
            V = (Xf / r) @ Xf.conj().transpose(0, 2, 1) / T
            w = np.linalg.solve(W @ V, np.broadcast_to(eye[:, n], (F, N))[..., None])[..., 0]
            w = w / np.sqrt(np.real(np.einsum("fi,fij,fj->f", w.conj(), V, w)))[:, None]
            W[:, n, :] = w.conj()
            Y[:, n, :] = np.einsum("fm,fmt->ft", W[:, n, :], Xf)
        history.append(AuxIVA.objective(W, Y))
    return Y.transpose(1, 2, 0), np.array(history)


# --- scene-level entry points -----------------------------------------------


def _channels(rendered, mics):
    refs = rendered.reference_mics
    if mics is None:
        return np.arange(rendered.n_mics)
    mics = np.asarray(sorted(set(int(m) for m in mics) | set(int(r) for r in refs)))
    return check_indices(mics, rendered.n_mics, "mics")


def _local_refs(channels, refs):
    pos = {int(c): i for i, c in enumerate(channels)}
    return np.array([pos[int(r)] for r in refs])


def separation_components(separator, rendered, channels):
    """Per-source contributions to each estimate: (P sources, N outputs, T), plus noise (N, T)."""
    comps = np.stack([separator.transform(rendered.images[p][channels]) for p in range(rendered.n_sources)])
    noise = separator.transform(rendered.noise[channels])
    return comps, noise


def _score(result, rendered):
    from .metrics import snr_from_components

    comps, noise = separation_components(result.separator, rendered, result.channels)
    N = rendered.n_sources
    refs = rendered.reference_mics
    result.per_source_snr = np.array([snr_from_components(comps[:, n], n, noise[n]) for n in range(N)])
    raw = rendered.images[:, refs, :]  # (P, N, T) unprocessed reference signals
    result.unprocessed_snr = np.array(
        [snr_from_components(raw[:, n], n, rendered.noise[refs[n]]) for n in range(N)]
    )
    return result


def separate_baseline(rendered, mics=None, score=True):
    channels = _channels(rendered, mics)
    sep = NearestMicSeparator(_local_refs(channels, rendered.reference_mics))
    x = rendered.mixture.samples[channels]
    est = sep.fit(x).transform(x)
    res = SeparationResult(est, "baseline", rendered.reference_mics.copy(), channels, sep)
    return _score(res, rendered) if score else res


def separate_iva(rendered, frame_len=2048, hop=1024, iterations=100, mics=None, tol=1e-6, score=True):
    channels = _channels(rendered, mics)
    sep = AuxIVA(_local_refs(channels, rendered.reference_mics), frame_len, hop, iterations, tol)
    x = rendered.mixture.samples[channels]
    est = sep.fit(x).transform(x)
    report = {
        "iterations": int(sep.n_iter_),
        "regularization_events": int(sep.regularization_events_),
        "objective_start": float(sep.objective_[0]),
        "objective_end": float(sep.objective_[-1]),
    }
    res = SeparationResult(est, "iva", rendered.reference_mics.copy(), channels, sep, report=report)
    return _score(res, rendered) if score else res


def separate_ideal(rendered, frame_len=2048, hop=1024, mics=None, loading=1e-6, score=True):
    channels = _channels(rendered, mics)
    sep = IdealMMSESeparator(frame_len, hop, loading=loading)
    x = rendered.mixture.samples[channels]
    est = sep.fit(x, rendered.reference_images()).transform(x)
    res = SeparationResult(est, "ideal", rendered.reference_mics.copy(), channels, sep)
    return _score(res, rendered) if score else res


SEPARATORS = {"baseline": separate_baseline, "iva": separate_iva, "ideal": separate_ideal}
