"""End-to-end experiment: render -> separate -> estimate -> design -> evaluate.

Every stage reads its inputs from and writes its outputs to ``out_dir`` so
stages can run as separate processes. Layout::

    config.json                 experiment configuration
    render/scene.json           geometry
    render/rirs.bin             impulse responses (N, M, L)
    render/sources.bin          estimation and evaluation source signals
    separation/<cell>.bin       estimates, demixing and separation scores
    stats/<cell>/<listener>.bin spatial statistics at the listener's own mics
    filters/<cell>/<listener>.bin single-target filters (N, 2, M, K+1)
    separation.csv enhancement.csv scatter.csv summary.csv
    manifest.json               deterministic record of config, versions and artifact hashes
    timings.json                wall-clock per stage (kept out of the manifest)

A cell is one ``(method, array_config)`` pair, named ``<method>-<config>``.
Sensor noise is regenerated from the seed instead of being stored.
"""

import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .enhance import EARS, BlockToeplitzSolver, RemixSpec, design_from_stats, save_filters, load_filters
from .io import atomic_write, read_sidecar, write_sidecar, write_wav
from .metrics import (
    EnhancementRow, SeparationRow, SnrReport, output_snr, rank_correlation, rows_to_csv,
    snr_from_components, summarize, summary_to_csv,
)
from .room import default_scene, load_scene, render, save_scene, scene_rirs, source_signals
from .separation import SEPARATORS
from .signal import FirFilter, MultichannelSignal, fir_apply
from .stats import SpatialStatsEstimator, load_stats, save_stats, to_lag_domain

log = logging.getLogger(__name__)

METHODS = ("baseline", "iva", "ideal")
STAGES = ("render", "separate", "estimate", "design", "evaluate")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    out_dir: str = "coopal-run"
    scene: str = None  # JSON scene file; None uses the built-in desk scene
    n_sources: int = 4  # only for the built-in scene
    methods: tuple = METHODS
    array_configs: tuple = None  # names from the scene; None means all
    gains: tuple = None  # optional extra remix; evaluation always sweeps single targets
    delay_ms: float = 16.0
    filter_ms: float = 128.0
    reir_ms: float = 32.0
    reir_pre_ms: float = 4.0
    reir_taper_ms: float = 2.0
    early_cutoff_ms: float = 32.0
    estimation_clip_s: float = 16.0
    eval_clip_s: float = 16.0
    seed: int = 0
    sep_frame_len: int = 2048
    sep_hop: int = 1024
    iva_iterations: int = 100
    iva_tol: float = 1e-6
    ideal_loading: float = 1e-6
    stats_frame_len: int = 4096
    stats_hop: int = 2048
    stats_fft_len: int = 8192
    write_wavs: bool = True

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {sorted(bad)}")
        if self.array_configs is not None:
            self.array_configs = tuple(self.array_configs)
        if self.gains is not None:
            self.gains = tuple(float(g) for g in self.gains)
        if self.estimation_clip_s <= 0 or self.eval_clip_s <= 0:
            raise ValueError("clip lengths must be positive")
        if not 0 <= self.delay_ms <= self.filter_ms:
            raise ValueError("delay_ms must lie in [0, filter_ms]")

    def samples(self, ms, sample_rate):
        return int(round(ms * sample_rate / 1000.0))

    def filter_order(self, sample_rate):
        return max(self.samples(self.filter_ms, sample_rate) - 1, 0)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def save(self, path=None):
        path = path or os.path.join(self.out_dir, "config.json")
        # the run directory is implied by where the file lives; keeps runs relocatable and comparable
        d = self.to_dict() | {"out_dir": "."}
        atomic_write(path, json.dumps(d, indent=2, sort_keys=True).encode())

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "config.json")) as fh:
            cfg = cls.from_dict(json.load(fh))
        cfg.out_dir = out_dir
        return cfg


def _path(cfg, *parts):
    return os.path.join(cfg.out_dir, *parts)


def _cell(method, array_config):
    return f"{method}-{array_config}"


def _scene(cfg):
    if cfg.scene:
        scene = load_scene(cfg.scene)
    else:
        scene = default_scene(cfg.n_sources)
    if not scene.listeners:
        raise ValueError("scene declares no listener devices")
    return scene


def _array_configs(cfg, scene):
    available = dict(scene.array_configs) or {"all": list(range(scene.n_mics))}
    names = cfg.array_configs or tuple(available)
    missing = [n for n in names if n not in available]
    if missing:
        raise ValueError(f"array configs {missing} not defined in the scene")
    return {n: available[n] for n in names}


def _cells(cfg, scene):
    return [(m, c) for m in cfg.methods for c in _array_configs(cfg, scene)]


# --- stages -----------------------------------------------------------------


def stage_render(cfg):
    """Write scene, impulse responses and the disjoint estimation/evaluation source clips."""
    scene = _scene(cfg)
    fs = scene.sample_rate
    n_est = int(round(cfg.estimation_clip_s * fs))
    n_eval = int(round(cfg.eval_clip_s * fs))
    sigs = source_signals(scene, (n_est + n_eval) / fs, seed=cfg.seed)
    est = np.stack([s.samples[0, :n_est] for s in sigs])
    ev = np.stack([s.samples[0, n_est : n_est + n_eval] for s in sigs])
    log.info("estimation clip [0, %d), evaluation clip [%d, %d) samples", n_est, n_est, n_est + n_eval)
    rirs = scene_rirs(scene)
    cfg.save()
    save_scene(scene, _path(cfg, "render", "scene.json"))
    write_sidecar(_path(cfg, "render", "rirs.bin"), "rirs", {"rirs": rirs}, {"sample_rate": fs})
    write_sidecar(
        _path(cfg, "render", "sources.bin"), "sources", {"estimation": est, "evaluation": ev},
        {"sample_rate": fs, "estimation_span": [0, n_est], "evaluation_span": [n_est, n_est + n_eval]},
    )
    if cfg.write_wavs:
        rendered = load_rendered(cfg)
        for L in scene.listeners:
            # every local microphone, so the file can be fed to ``coopal enhance`` with the listener's stats
            mix = rendered["evaluation"].mixture.samples[scene.device_channels(L.name)]
            write_wav(_path(cfg, "wav", f"{L.name}_mixture.wav"), MultichannelSignal(mix, fs), "pcm16")


_RENDER_CACHE = {}


def load_rendered(cfg):
    """Re-render both clips from the stored sources and impulse responses (memoised per run dir)."""
    key = os.path.abspath(cfg.out_dir)
    stamp = tuple(os.path.getmtime(_path(cfg, "render", f)) for f in ("rirs.bin", "sources.bin", "scene.json"))
    if key in _RENDER_CACHE and _RENDER_CACHE[key][0] == stamp:
        return _RENDER_CACHE[key][1]
    scene = load_scene(_path(cfg, "render", "scene.json"))
    rirs = read_sidecar(_path(cfg, "render", "rirs.bin"), "rirs")[0]["rirs"]
    src, meta = read_sidecar(_path(cfg, "render", "sources.bin"), "sources")
    fs = scene.sample_rate
    out = {"scene": scene}
    for i, clip in enumerate(("estimation", "evaluation")):
        sigs = [MultichannelSignal(x[None, :], fs) for x in src[clip]]
        out[clip] = render(scene.with_signals(sigs), early_cutoff_ms=cfg.early_cutoff_ms, rirs=rirs,
                           noise_seed=[cfg.seed, i])
    _RENDER_CACHE.clear()
    _RENDER_CACHE[key] = (stamp, out)
    return out


def stage_separate(cfg):
    rendered = load_rendered(cfg)
    scene, est = rendered["scene"], rendered["estimation"]
    for method, name in _cells(cfg, scene):
        mics = _array_configs(cfg, scene)[name]
        if method == "baseline":
            res = SEPARATORS[method](est, mics=mics)
        elif method == "iva":
            res = SEPARATORS[method](est, cfg.sep_frame_len, cfg.sep_hop, cfg.iva_iterations, mics, cfg.iva_tol)
        else:
            res = SEPARATORS[method](est, cfg.sep_frame_len, cfg.sep_hop, mics, cfg.ideal_loading)
        arrays = {
            "estimates": res.estimates,
            "channels": res.channels,
            "reference_mics": res.reference_mics,
            "per_source_snr": res.per_source_snr,
            "unprocessed_snr": res.unprocessed_snr,
        }
        demix = getattr(res.separator, "demix_", None)
        if demix is not None:
            arrays["demix"] = demix
        write_sidecar(_path(cfg, "separation", f"{_cell(method, name)}.bin"), "separation", arrays,
                      {"method": method, "array_config": name, "report": res.report})
        log.info("separated %s/%s: median improvement %.2f dB", method, name,
                 float(np.median(res.per_source_improvement)))


def stage_estimate(cfg):
    rendered = load_rendered(cfg)
    scene, est = rendered["scene"], rendered["estimation"]
    fs = scene.sample_rate
    for method, name in _cells(cfg, scene):
        cell = _cell(method, name)
        arrays, _ = read_sidecar(_path(cfg, "separation", f"{cell}.bin"), "separation")
        for L in scene.listeners:
            ch = scene.device_channels(L.name)
            stats = SpatialStatsEstimator(cfg.stats_frame_len, cfg.stats_hop, cfg.stats_fft_len).fit(
                est.mixture.samples[ch], arrays["estimates"], fs).stats_
            save_stats(_path(cfg, "stats", cell, f"{L.name}.bin"), stats,
                       {"channels": ch.tolist(), "ear_channels": list(L.ear_channels), "listener": L.name})


def single_target_sweep(scene, stats_by_listener, cfg, solvers=None):
    """One filter per (listener, source, ear) with ``g_n = 1`` for the target only.

    Returns ``{(listener, source, ear): MwfSolution}``; ``2 * listeners * N`` entries.
    ``solvers`` caches one factorisation per listener across calls.
    """
    solvers = {} if solvers is None else solvers
    fs = scene.sample_rate
    K = cfg.filter_order(fs)
    alpha = cfg.samples(cfg.delay_ms, fs)
    reir = (cfg.reir_pre_ms, cfg.reir_ms, cfg.reir_taper_ms)
    out = {}
    for L in scene.listeners:
        stats = stats_by_listener[L.name]
        solver = _solver_for(solvers, L.name, stats, K, alpha)
        for n in range(scene.n_sources):
            gains = np.zeros(scene.n_sources)
            gains[n] = 1.0
            for ear in EARS:
                spec = RemixSpec(tuple(gains), alpha, K, ear)
                out[(L.name, n, ear)] = design_from_stats(stats, spec, L.ear_channels, reir, solver=solver)
    return out


def _solver_for(solvers, name, stats, K, alpha):
    # r_xx depends only on the listener's own mixture, so every cell can share one factorisation
    cached = solvers.get(name)
    if cached is not None and cached[0].shape == stats.R_xx.shape and np.array_equal(cached[0], stats.R_xx):
        return cached[1]
    zeros = np.zeros(stats.R_xs.shape + (stats.n_mics,))
    corr = to_lag_domain(stats.R_xx, zeros, np.zeros(stats.n_sources), K, alpha)
    solver = BlockToeplitzSolver(corr.r_xx, K)
    solvers[name] = (stats.R_xx, solver)
    return solver


def stage_design(cfg, solvers=None):
    scene = load_scene(_path(cfg, "render", "scene.json"))
    fs = scene.sample_rate
    K = cfg.filter_order(fs)
    alpha = cfg.samples(cfg.delay_ms, fs)
    solvers = {} if solvers is None else solvers
    for method, name in _cells(cfg, scene):
        cell = _cell(method, name)
        stats = {L.name: load_stats(_path(cfg, "stats", cell, f"{L.name}.bin"))[0] for L in scene.listeners}
        sols = single_target_sweep(scene, stats, cfg, solvers)
        for L in scene.listeners:
            M = stats[L.name].n_mics
            taps = np.zeros((scene.n_sources, 2, M, K + 1))
            resid = np.zeros((scene.n_sources, 2))
            loading = np.zeros((scene.n_sources, 2))
            for n in range(scene.n_sources):
                for e, ear in enumerate(EARS):
                    s = sols[(L.name, n, ear)]
                    taps[n, e], resid[n, e], loading[n, e] = s.filter.taps, s.residual_norm, s.loading
            meta = {"order": K, "delay": alpha, "listener": L.name, "channels": scene.device_channels(L.name).tolist(),
                    "max_residual": float(resid.max()), "loading": loading.tolist()}
            save_filters(_path(cfg, "filters", cell, f"{L.name}.bin"), taps, meta)
            if cfg.gains is not None:
                remix = [design_from_stats(stats[L.name], RemixSpec(cfg.gains, alpha, K, ear), L.ear_channels,
                                           (cfg.reir_pre_ms, cfg.reir_ms, cfg.reir_taper_ms),
                                           solver=_solver_for(solvers, L.name, stats[L.name], K, alpha))
                         for ear in EARS]
                save_filters(_path(cfg, "filters", cell, f"{L.name}_remix.bin"),
                             np.stack([r.filter.taps for r in remix]), dict(meta, gains=list(cfg.gains)))


def stage_evaluate(cfg):
    rendered = load_rendered(cfg)
    scene, ev = rendered["scene"], rendered["evaluation"]
    fs = scene.sample_rate
    N = scene.n_sources
    report = SnrReport()
    for method, name in _cells(cfg, scene):
        cell = _cell(method, name)
        arrays, _ = read_sidecar(_path(cfg, "separation", f"{cell}.bin"), "separation")
        for n in range(N):
            report.separation.append(SeparationRow(
                method, name, N, n, int(arrays["reference_mics"][n]), float(arrays["per_source_snr"][n]),
                float(arrays["per_source_snr"][n] - arrays["unprocessed_snr"][n])))
        for L in scene.listeners:
            taps, meta = load_filters(_path(cfg, "filters", cell, f"{L.name}.bin"))
            ch = scene.device_channels(L.name)
            ears = scene.ear_channels(L.name)
            images, noise = ev.images[:, ch], ev.noise[ch]
            for n in range(N):
                for e, ear in enumerate(EARS):
                    filt = FirFilter(taps[n, e], int(meta["delay"]))
                    snr = output_snr(filt, images, n, noise)
                    raw = snr_from_components(ev.images[:, ears[e]], n, ev.noise[ears[e]])
                    report.enhancement.append(EnhancementRow(method, name, N, n, L.name, ear, snr, snr - raw))
            if cfg.write_wavs:
                x = ev.mixture.samples[ch]
                out = np.stack([fir_apply(FirFilter(taps[0, e], int(meta["delay"])), x) for e in range(2)])
                write_wav(_path(cfg, "wav", cell, f"{L.name}_source0.wav"), MultichannelSignal(out, fs), "pcm16")
                remix_path = _path(cfg, "filters", cell, f"{L.name}_remix.bin")
                if cfg.gains is not None and os.path.exists(remix_path):
                    rt, rmeta = load_filters(remix_path)
                    out = np.stack([fir_apply(FirFilter(rt[e], int(rmeta["delay"])), x) for e in range(2)])
                    write_wav(_path(cfg, "wav", cell, f"{L.name}_remix.wav"), MultichannelSignal(out, fs), "pcm16")

    summary = summarize(report)
    atomic_write(_path(cfg, "separation.csv"), rows_to_csv(report.separation).encode())
    atomic_write(_path(cfg, "enhancement.csv"), rows_to_csv(report.enhancement).encode())
    atomic_write(_path(cfg, "scatter.csv"), rows_to_csv(summary["scatter"]).encode())
    atomic_write(_path(cfg, "summary.csv"), summary_to_csv(summary).encode())
    report.meta = {
        "spearman_points": rank_correlation(summary["scatter"]),
        "spearman_cells": cell_rank_correlation(summary["table"]),
        "note": "sources and noise are rendered separately, so no ambient noise is amplified by image recombination",
    }
    return report, summary


def cell_rank_correlation(table):
    """Spearman correlation of per-cell median separation SNR vs median enhancement SNR."""
    sep = {(t["method"], t["array_config"]): t["snr"]["median"] for t in table if t["kind"] == "separation"}
    pts = [
        {"separation_snr_db": sep[(t["method"], t["array_config"])], "enhancement_snr_db": t["snr"]["median"]}
        for t in table if t["kind"] == "enhancement" and (t["method"], t["array_config"]) in sep
    ]
    return rank_correlation(pts)


# --- orchestration ----------------------------------------------------------


def _versions():
    import scipy
    import sklearn

    return {"coopal": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "python": platform.python_version()}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg, stages, results=None):
    artifacts = {}
    for root, _, files in os.walk(cfg.out_dir):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), cfg.out_dir)
            if rel in ("manifest.json", "timings.json") or f.startswith(".tmp-"):
                continue
            artifacts[rel.replace(os.sep, "/")] = _sha256(os.path.join(root, f))
    manifest = {
        "config": cfg.to_dict() | {"out_dir": "."},
        "seed": cfg.seed,
        "versions": _versions(),
        "stages": list(stages),
        "artifacts": dict(sorted(artifacts.items())),
        "results": results or {},
    }
    atomic_write(_path(cfg, "manifest.json"), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def _record_timing(cfg, stage, seconds):
    path = _path(cfg, "timings.json")
    t = {}
    if os.path.exists(path):
        with open(path) as fh:
            t = json.load(fh)
    t[stage] = round(seconds, 3)
    atomic_write(path, json.dumps(t, indent=2, sort_keys=True).encode())


def run_stage(cfg, stage, **kw):
    """Run one stage, wrapping any failure in a ``StageError`` naming the stage."""
    funcs = {"render": stage_render, "separate": stage_separate, "estimate": stage_estimate,
             "design": stage_design, "evaluate": stage_evaluate}
    if stage not in funcs:
        raise ValueError(f"unknown stage {stage!r}")
    t0 = time.perf_counter()
    try:
        out = funcs[stage](cfg, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    _record_timing(cfg, stage, time.perf_counter() - t0)
    return out


def run_experiment(cfg):
    """Run every stage and return ``(report, summary)``."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    solvers = {}
    for stage in STAGES[:3]:
        run_stage(cfg, stage)
    run_stage(cfg, "design", solvers=solvers)
    report, summary = run_stage(cfg, "evaluate")
    write_manifest(cfg, STAGES, report.meta)
    return report, summary
