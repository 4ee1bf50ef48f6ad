"""Shoebox room simulation and scene rendering.

Impulse responses come from the image-source method with per-wall pressure
reflection coefficients ``sqrt(1 - absorption)`` and 81-tap Hann-windowed
sinc fractional delays. Reflective responses are high-passed (2nd-order
Butterworth, 50 Hz) to remove the DC build-up that summing thousands of
positive image pulses produces; without it the Schroeder decay is dominated
by a spurious low-frequency tail.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .signal import MultichannelSignal

SINC_TAPS = 81
FRACTION_STEPS = 1024  # fractional-delay table resolution (1/1024 sample)
HIGHPASS_HZ = 50.0
WALLS = ("x0", "x1", "y0", "y1", "z0", "z1")


def _absorption6(absorption):
    a = np.broadcast_to(np.asarray(absorption, dtype=float), (6,)).copy()
    if np.any(a <= 0) or np.any(a > 1):
        raise ValueError("absorption coefficients must lie in (0, 1]")
    return a


def _sinc_table():
    hw = SINC_TAPS // 2
    k = np.arange(-hw, hw + 1)
    frac = np.arange(-FRACTION_STEPS // 2, FRACTION_STEPS // 2 + 1) / FRACTION_STEPS
    x = k[None, :] - frac[:, None]
    return np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * x / (hw + 1)))


_SINC_TABLE = _sinc_table()


def sabine_t60(room_dims, absorption):
    """Sabine reverberation time ``0.161 V / sum(S_i a_i)`` in seconds."""
    Lx, Ly, Lz = room_dims
    a = _absorption6(absorption)
    areas = np.array([Ly * Lz, Ly * Lz, Lx * Lz, Lx * Lz, Lx * Ly, Lx * Ly])
    return 0.161 * Lx * Ly * Lz / float(np.sum(areas * a))


def _check_inside(room_dims, pos, what):
    pos = np.asarray(pos, dtype=float)
    if pos.shape[-1] != 3:
        raise ValueError(f"{what} positions must be 3-vectors")
    if np.any(pos <= 0) or np.any(pos >= np.asarray(room_dims)):
        raise ValueError(f"{what} position {pos.tolist()} is not strictly inside the room")
    return pos


def simulate_rirs(room_dims, src_pos, mic_pos, absorption, max_order=None, sample_rate=16000,
                  speed_of_sound=343.0, rir_len=None, highpass=True):
    """Image-source impulse responses from one source to several microphones.

    Returns an array of shape ``(n_mics, rir_len)``. ``max_order=None`` keeps
    every image arriving within ``rir_len`` samples; an integer limits the
    total number of wall reflections.
    """
    L = np.asarray(room_dims, dtype=float)
    src = _check_inside(L, src_pos, "source")
    mics = _check_inside(L, np.atleast_2d(mic_pos), "microphone")
    beta = np.sqrt(1.0 - _absorption6(absorption)).reshape(3, 2)  # [axis, (low wall, high wall)]
    fs, c = float(sample_rate), float(speed_of_sound)
    dist = np.linalg.norm(mics - src, axis=1)
    if np.any(dist < 1e-3):
        raise ValueError("source and microphone are coincident")
    hw = SINC_TAPS // 2
    if rir_len is None:
        if max_order == 0:
            rir_len = int(np.ceil(dist.max() / c * fs)) + hw + 1
        else:
            rir_len = int(np.ceil(1.2 * sabine_t60(L, absorption) * fs))
    rir_len = int(rir_len)
    if max_order is not None and max_order < 0:
        raise ValueError("max_order must be >= 0")

    reach = rir_len / fs * c
    nmax = np.ceil(reach / (2 * L)).astype(int) + 1
    if max_order is not None:
        nmax = np.minimum(nmax, max_order // 2 + 1)
    grid = np.stack(np.meshgrid(*[np.arange(-k, k + 1) for k in nmax], indexing="ij"), -1).reshape(-1, 3)
    k = np.arange(-hw, hw + 1)

    out = np.zeros((len(mics), rir_len + 2 * hw + 1))
    for q in np.ndindex(2, 2, 2):
        q = np.array(q)
        n_low = np.abs(grid - q)  # reflections off the walls at 0
        n_high = np.abs(grid)  # reflections off the walls at L
        order = (n_low + n_high).sum(axis=1)
        gain = np.prod(beta[:, 0] ** n_low * beta[:, 1] ** n_high, axis=1)
        keep = np.ones(len(grid), bool) if max_order is None else order <= max_order
        img = (1 - 2 * q) * src + 2 * grid[keep] * L
        gain = gain[keep]
        for m, mic in enumerate(mics):
            d = np.linalg.norm(img - mic, axis=1)
            delay = d / c * fs
            sel = delay < rir_len
            if not np.any(sel):
                continue
            delay, amp = delay[sel], gain[sel] / (4 * np.pi * d[sel])
            whole = np.round(delay).astype(int)
            row = np.round((delay - whole) * FRACTION_STEPS).astype(int) + FRACTION_STEPS // 2
            pulses = _SINC_TABLE[row] * amp[:, None]
            idx = (whole[:, None] + k[None, :] + hw).ravel()
            out[m] += np.bincount(idx, pulses.ravel(), minlength=out.shape[1])[: out.shape[1]]
    rirs = out[:, hw : hw + rir_len]
    if highpass and max_order != 0:
        sos = butter(2, HIGHPASS_HZ, "highpass", fs=fs, output="sos")
        rirs = sosfilt(sos, rirs, axis=-1)
    return rirs


def simulate_rir(room, src_pos, mic_pos, absorption, max_order=None, sample_rate=16000,
                 speed_of_sound=343.0, rir_len=None):
    """Single source-to-microphone impulse response (1-D array)."""
    return simulate_rirs(room, src_pos, np.atleast_2d(mic_pos), absorption, max_order, sample_rate,
                         speed_of_sound, rir_len)[0]


def schroeder_curve(rir):
    """Backward-integrated energy decay in dB, normalised to 0 dB at t=0."""
    e = np.cumsum(np.asarray(rir, float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(e / e[0])


def schroeder_t60(rir, sample_rate, start_db=-5.0, stop_db=-25.0):
    """T60 extrapolated from a line fit to the Schroeder curve (T20 by default)."""
    edc = schroeder_curve(rir)
    i0 = int(np.argmax(edc <= start_db))
    i1 = int(np.argmax(edc < stop_db))
    if i1 <= i0 + 1:
        raise ValueError("impulse response does not decay through the fit range")
    t = np.arange(i0, i1) / sample_rate
    slope = np.polyfit(t, edc[i0:i1], 1)[0]
    return -60.0 / slope


# --- scenes -----------------------------------------------------------------


@dataclass
class Source:
    position: np.ndarray
    signal: MultichannelSignal = None
    wav: str = None  # optional user-supplied material


@dataclass
class Device:
    name: str
    mic_positions: np.ndarray
    is_listener: bool = False
    ear_channels: tuple = None  # (left, right) local indices
    kind: str = "array"


@dataclass
class Scene:
    room_dims: np.ndarray
    absorption: np.ndarray
    sources: list
    devices: list
    speed_of_sound: float = 343.0
    noise_level: float = -30.0  # dB relative to the clean mixture RMS; None disables noise
    sample_rate: int = 16000
    seed: int = 0
    array_configs: dict = field(default_factory=dict)
    max_order: int = None
    rir_len_s: float = None

    def __post_init__(self):
        self.room_dims = np.asarray(self.room_dims, dtype=float)
        self.absorption = _absorption6(self.absorption)
        for s in self.sources:
            s.position = _check_inside(self.room_dims, s.position, "source")
        for d in self.devices:
            d.mic_positions = _check_inside(self.room_dims, np.atleast_2d(d.mic_positions), "microphone")
            if d.is_listener:
                if d.ear_channels is None or len(d.ear_channels) != 2:
                    raise ValueError(f"listener {d.name!r} must declare (left, right) ear channels")
                d.ear_channels = tuple(int(i) for i in d.ear_channels)
                if len(set(d.ear_channels)) != 2 or max(d.ear_channels) >= len(d.mic_positions):
                    raise ValueError(f"listener {d.name!r} has invalid ear channels {d.ear_channels}")
        mics = self.mic_positions
        if len(mics) > 1:
            diff = np.linalg.norm(mics[:, None] - mics[None], axis=-1)
            np.fill_diagonal(diff, np.inf)
            if diff.min() <= 1e-3:
                raise ValueError("two microphones are closer than 1 mm")
        names = [d.name for d in self.devices]
        if len(set(names)) != len(names):
            raise ValueError("device names must be unique")

    @property
    def mic_positions(self):
        return np.concatenate([d.mic_positions for d in self.devices], axis=0)

    @property
    def n_mics(self):
        return sum(len(d.mic_positions) for d in self.devices)

    @property
    def n_sources(self):
        return len(self.sources)

    def device_channels(self, name):
        start = 0
        for d in self.devices:
            if d.name == name:
                return np.arange(start, start + len(d.mic_positions))
            start += len(d.mic_positions)
        raise KeyError(name)

    @property
    def listeners(self):
        return [d for d in self.devices if d.is_listener]

    def ear_channels(self, name):
        """Global (left, right) microphone indices of a listener."""
        dev = next(d for d in self.devices if d.name == name)
        chans = self.device_channels(name)
        return int(chans[dev.ear_channels[0]]), int(chans[dev.ear_channels[1]])

    def reference_mics(self):
        """Nearest microphone to each source (lowest index on ties)."""
        mics = self.mic_positions
        refs = [int(np.argmin(np.linalg.norm(mics - s.position, axis=1))) for s in self.sources]
        if len(set(refs)) != len(refs):
            raise ValueError(f"sources share a nearest microphone: {refs}")
        return np.array(refs)

    def with_signals(self, signals):
        if len(signals) != self.n_sources:
            raise ValueError("one signal per source required")
        sources = [replace(s, signal=sig) for s, sig in zip(self.sources, signals)]
        return replace(self, sources=sources)

    def to_dict(self):
        return {
            "room_dims": self.room_dims.tolist(),
            "absorption": self.absorption.tolist(),
            "speed_of_sound": self.speed_of_sound,
            "noise_level": self.noise_level,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "max_order": self.max_order,
            "rir_len_s": self.rir_len_s,
            "sources": [
                {"position": s.position.tolist(), **({"wav": s.wav} if s.wav else {})} for s in self.sources
            ],
            "devices": [
                {
                    "name": d.name,
                    "kind": d.kind,
                    "mic_positions": d.mic_positions.tolist(),
                    "is_listener": d.is_listener,
                    "ear_channels": list(d.ear_channels) if d.ear_channels else None,
                }
                for d in self.devices
            ],
            "array_configs": {k: [int(i) for i in v] for k, v in self.array_configs.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            room_dims=d["room_dims"],
            absorption=d["absorption"],
            sources=[Source(np.asarray(s["position"], float), wav=s.get("wav")) for s in d["sources"]],
            devices=[
                Device(
                    name=v["name"],
                    mic_positions=np.asarray(v["mic_positions"], float),
                    is_listener=bool(v.get("is_listener", False)),
                    ear_channels=tuple(v["ear_channels"]) if v.get("ear_channels") else None,
                    kind=v.get("kind", "array"),
                )
                for v in d["devices"]
            ],
            speed_of_sound=float(d.get("speed_of_sound", 343.0)),
            noise_level=None if d.get("noise_level", -30.0) is None else float(d.get("noise_level", -30.0)),
            sample_rate=int(d.get("sample_rate", 16000)),
            seed=int(d.get("seed", 0)),
            array_configs={k: list(v) for k, v in d.get("array_configs", {}).items()},
            max_order=d.get("max_order"),
            rir_len_s=d.get("rir_len_s"),
        )


def save_scene(scene, path):
    from .io import atomic_write

    atomic_write(path, json.dumps(scene.to_dict(), indent=2, sort_keys=True).encode("utf-8"))


def load_scene(path):
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


@dataclass
class RenderedScene:
    images: np.ndarray  # (N, M, T) full source images
    early_images: np.ndarray  # (N, M, T)
    noise: np.ndarray  # (M, T)
    reference_mics: np.ndarray  # (N,)
    rirs: np.ndarray  # (N, M, rir_len)
    direct_delays: np.ndarray  # (N, M) in samples
    sample_rate: int
    scene: Scene = None

    @property
    def mixture(self):
        return MultichannelSignal(self.images.sum(axis=0) + self.noise, self.sample_rate)

    @property
    def n_sources(self):
        return self.images.shape[0]

    @property
    def n_mics(self):
        return self.images.shape[1]

    @property
    def n_samples(self):
        return self.images.shape[2]

    def image(self, n):
        return MultichannelSignal(self.images[n], self.sample_rate)

    def reference_images(self):
        """Each source's image at its own reference microphone, shape (N, T)."""
        return self.images[np.arange(self.n_sources), self.reference_mics]


def scene_rirs(scene, max_order=None):
    """Impulse responses for every (source, mic) pair, shape (N, M, rir_len)."""
    max_order = scene.max_order if max_order is None else max_order
    mics = scene.mic_positions
    rir_len = None if scene.rir_len_s is None else int(round(scene.rir_len_s * scene.sample_rate))
    if rir_len is None and max_order != 0:
        rir_len = int(np.ceil(1.2 * sabine_t60(scene.room_dims, scene.absorption) * scene.sample_rate))
    per_source = [
        simulate_rirs(scene.room_dims, s.position, mics, scene.absorption, max_order, scene.sample_rate,
                      scene.speed_of_sound, rir_len)
        for s in scene.sources
    ]
    n = max(r.shape[1] for r in per_source)
    return np.stack([np.pad(r, ((0, 0), (0, n - r.shape[1]))) for r in per_source])


def direct_delays(scene):
    d = np.linalg.norm(scene.mic_positions[None] - np.stack([s.position for s in scene.sources])[:, None], axis=-1)
    return d / scene.speed_of_sound * scene.sample_rate


def render(scene, max_order=None, early_cutoff_ms=32.0, rirs=None, noise_seed=None):
    """Convolve each source with its impulse responses and add sensor noise.

    Early images use each response truncated ``early_cutoff_ms`` after its
    direct-path arrival. Noise is white Gaussian, independent per
    microphone, at ``scene.noise_level`` dB relative to the clean mixture RMS.
    """
    if any(s.signal is None for s in scene.sources):
        raise ValueError("every source needs a signal before rendering")
    lengths = {s.signal.n_samples for s in scene.sources}
    if len(lengths) != 1:
        raise ValueError("source signals must share one length")
    T = lengths.pop()
    fs = scene.sample_rate
    if rirs is None:
        rirs = scene_rirs(scene, max_order)
    delays = direct_delays(scene)
    cut = np.floor(delays + early_cutoff_ms * fs / 1000.0).astype(int) + 1
    lag = np.arange(rirs.shape[-1])
    early_rirs = np.where(lag[None, None, :] < cut[..., None], rirs, 0.0)

    N, M = rirs.shape[:2]
    images = np.empty((N, M, T))
    early = np.empty((N, M, T))
    for n, src in enumerate(scene.sources):
        s = src.signal.samples[0][None, :]
        images[n] = fftconvolve(s, rirs[n], axes=-1)[:, :T]
        early[n] = fftconvolve(s, early_rirs[n], axes=-1)[:, :T]
    clean = images.sum(axis=0)
    rms = np.sqrt(np.mean(clean**2))
    seed = scene.seed if noise_seed is None else noise_seed
    rng = np.random.default_rng(seed)
    if scene.noise_level is None:
        noise = np.zeros((M, T))
    else:
        noise = rng.standard_normal((M, T)) * rms * 10 ** (scene.noise_level / 20.0)
    return RenderedScene(images, early, noise, scene.reference_mics(), rirs, delays, fs, scene)


# --- source material --------------------------------------------------------


def speech_like(duration_s, sample_rate=16000, rng=None):
    """Speech-shaped test signal: voiced buzz plus noise with syllabic gating.

    The long-term spectrum rolls off above ~500 Hz, and the amplitude follows
    a train of 100-350 ms syllables separated by short gaps and occasional
    pauses, which gives the super-Gaussian envelope statistics separation
    algorithms rely on.
    """
    rng = np.random.default_rng(rng)
    T = int(round(duration_s * sample_rate))
    t = np.arange(T) / sample_rate

    f0 = rng.uniform(95, 210) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    voiced = np.zeros(T)
    for h in range(1, int(4000 / f0.min())):
        voiced += np.cos(h * phase + rng.uniform(0, 2 * np.pi)) / h * (h * f0.mean() < 0.45 * sample_rate)
    noise = rng.standard_normal(T)

    env = np.zeros(T)
    voicing = np.zeros(T)
    pos = int(rng.uniform(0, 0.2) * sample_rate)
    while pos < T:
        dur = int(rng.uniform(0.10, 0.35) * sample_rate)
        seg = np.hanning(dur + 2)[1:-1] ** 0.7 * rng.uniform(0.4, 1.0)
        end = min(pos + dur, T)
        env[pos:end] = seg[: end - pos]
        voicing[pos:end] = rng.uniform(0.5, 1.0)
        gap = rng.uniform(0.02, 0.12) if rng.random() > 0.15 else rng.uniform(0.3, 0.8)
        pos = end + int(gap * sample_rate)

    sig = voicing * voiced / np.std(voiced) + (1.2 - voicing) * noise
    sos_band = butter(2, [80, min(7000, 0.45 * sample_rate)], "bandpass", fs=sample_rate, output="sos")
    sos_tilt = butter(1, 500, "lowpass", fs=sample_rate, output="sos")
    shaped = sosfilt(sos_band, sig)
    shaped = 0.35 * shaped + sosfilt(sos_tilt, shaped)
    out = shaped * env
    return out / (np.sqrt(np.mean(out**2)) + 1e-12) * 0.05


def source_signals(scene, duration_s, seed=None):
    """One signal per source: user WAV when given, else deterministic speech-like material."""
    seed = scene.seed if seed is None else seed
    T = int(round(duration_s * scene.sample_rate))
    out = []
    for n, src in enumerate(scene.sources):
        if src.wav:
            from .io import read_wav

            w = read_wav(src.wav)
            if w.sample_rate != scene.sample_rate:
                raise ValueError(f"{src.wav}: sample rate {w.sample_rate} != scene rate {scene.sample_rate}")
            x = w.samples[0]
            if len(x) < T:
                raise ValueError(f"{src.wav}: needs at least {duration_s} s of audio")
            x = x[:T]
        else:
            x = speech_like(duration_s, scene.sample_rate, np.random.default_rng([seed, n]))
        out.append(MultichannelSignal(x[None, :], scene.sample_rate))
    return out


# --- default desk-scale scene ------------------------------------------------


def _circle(center, radius, n, z):
    ang = 2 * np.pi * np.arange(n) / n
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang), np.full(n, z)], 1)


def _wearable(center, facing_deg=90.0):
    """Idealised 4-mic wearable: two ear-canal mics and two behind-the-ear mics."""
    th = np.deg2rad(facing_deg)
    fwd = np.array([np.cos(th), np.sin(th), 0.0])
    left = np.array([-np.sin(th), np.cos(th), 0.0])
    c = np.asarray(center, float)
    return np.stack([
        c + 0.08 * left,
        c - 0.08 * left,
        c + 0.09 * left - 0.03 * fwd + [0, 0, 0.02],
        c - 0.09 * left - 0.03 * fwd + [0, 0, 0.02],
    ])


TABLETOPS = [(2.2, 3.0), (6.8, 3.0), (2.2, 10.0), (6.8, 10.0)]


def default_scene(n_sources=4, seed=0, absorption=0.45, noise_level=-30.0, sample_rate=16000):
    """9 x 13 x 3 m room, two 4-mic listeners and four 4-mic tabletop arrays.

    Each source stands 0.6 m from a tabletop array so that its nearest
    microphone is unique. With up to 10 sources the extra talkers are spread
    around the same tables.
    """
    if not 1 <= n_sources <= 10:
        raise ValueError("default scene supports 1-10 sources")
    devices = [
        Device("listener_a", _wearable((4.0, 5.5, 1.6), 90.0), True, (0, 1), "wearable"),
        Device("listener_b", _wearable((5.0, 8.0, 1.6), 270.0), True, (0, 1), "wearable"),
    ]
    for i, c in enumerate(TABLETOPS):
        devices.append(Device(f"tabletop_{i}", _circle(c, 0.05, 4, 0.8), False, None, "tabletop"))
    # extra talkers move a quarter turn round the same table, so each faces a different mic
    angles = [200, -20, 160, 20]
    sources = []
    for n in range(n_sources):
        c = TABLETOPS[n % 4]
        a = np.deg2rad(angles[n % 4] + 90 * (n // 4))
        sources.append(Source(np.array([c[0] + 0.6 * np.cos(a), c[1] + 0.6 * np.sin(a), 1.5])))
    scene = Scene([9.0, 13.0, 3.0], absorption, sources, devices, noise_level=noise_level,
                  sample_rate=sample_rate, seed=seed, rir_len_s=0.5)
    wearable = np.concatenate([scene.device_channels(d.name) for d in devices if d.kind == "wearable"])
    tabletop = np.concatenate([scene.device_channels(d.name) for d in devices if d.kind == "tabletop"])
    scene.array_configs = {
        "reference": [],
        "wearable": wearable.tolist(),
        "tabletop": tabletop.tolist(),
        "all": list(range(scene.n_mics)),
    }
    return scene
