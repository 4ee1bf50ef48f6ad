import numpy as np
import pytest

from coopal.room import Device, Scene, Source, render, speech_like
from coopal.signal import MultichannelSignal

FS = 16000


def small_scene(n_sources=2, noise_level=-30.0, max_order=None, absorption=0.5, rir_len_s=0.15):
    """4 x 3.5 x 2.8 m room, a 2-mic listener and a 3-mic desk array."""
    mics = np.array([[1.0, 1.0, 1.5], [1.2, 1.0, 1.5], [3.0, 2.5, 1.5], [3.2, 2.5, 1.5], [2.0, 2.0, 1.2]])
    devices = [
        Device("head", mics[:2], True, (0, 1), "wearable"),
        Device("desk", mics[2:], False, None, "tabletop"),
    ]
    pos = ([0.8, 1.6, 1.5], [3.4, 2.9, 1.5], [2.0, 2.6, 1.6])
    srcs = [Source(np.array(p)) for p in pos[:n_sources]]
    return Scene([4.0, 3.5, 2.8], absorption, srcs, devices, noise_level=noise_level, max_order=max_order,
                 rir_len_s=rir_len_s, array_configs={"wearable": [0, 1], "all": [0, 1, 2, 3, 4]})


def speech_signals(scene, seconds, seed=0):
    return [
        MultichannelSignal(speech_like(seconds, FS, np.random.default_rng([seed, n]))[None], FS)
        for n in range(scene.n_sources)
    ]


def render_small(n_sources=2, seconds=4.0, seed=0, **kw):
    s = small_scene(n_sources, **kw)
    return render(s.with_signals(speech_signals(s, seconds, seed)))


@pytest.fixture(scope="session")
def small_rendered():
    return render_small(2, 6.0)


def sample_correlations(x, y, order, delay):
    """Biased time-domain sample correlations by direct summation.

    ``r_xx[k] = mean_t x[t] x[t-k]^T`` and ``r_xy[l] = mean_t x[t] y[t-l]``
    with zero padding, which keeps the block-Toeplitz matrix positive semidefinite.
    """
    from coopal.stats import LagCorrelations

    x = np.atleast_2d(x)
    M, T = x.shape
    K = order

    def shifted(v, k):
        out = np.zeros_like(v)
        if k >= 0:
            out[..., k:] = v[..., : T - k]
        else:
            out[..., :k] = v[..., -k:]
        return out

    r_xx = np.stack([x @ shifted(x, k).T / T for k in range(-K, K + 1)])
    r_xy = np.stack([x @ shifted(y, l) / T for l in range(delay - K, delay + 1)])
    return LagCorrelations(r_xx, r_xy, K, delay)


def small_config(out_dir, scene_path, **kw):
    """Experiment settings scaled down for a few-second run on the small scene."""
    from coopal.pipeline import ExperimentConfig

    base = dict(
        out_dir=str(out_dir), scene=str(scene_path), delay_ms=4.0, filter_ms=16.0, reir_ms=8.0, reir_pre_ms=1.0,
        reir_taper_ms=1.0, estimation_clip_s=3.0, eval_clip_s=2.0, sep_frame_len=1024, sep_hop=512,
        iva_iterations=20, stats_frame_len=1024, stats_hop=512, stats_fft_len=2048,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    from coopal.pipeline import run_experiment
    from coopal.room import save_scene

    root = tmp_path_factory.mktemp("run")
    save_scene(small_scene(2), root / "scene.json")
    cfg = small_config(root / "out", root / "scene.json", gains=(1.0, 0.5))
    report, summary = run_experiment(cfg)
    return cfg, report, summary


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
