"""Synthetic paired EEG/EXG recordings driven by a shared latent state.

Latent state per pair: a class ``k``, a frequency offset ``delta`` (Hz) and
a slow amplitude envelope with one level per window. The EEG renders it as a
sinusoid mixture dominated by ``4 + 3k + delta`` Hz; the EXG renders it as a
sawtooth-like harmonic stack on ``2 + 1.5k + delta/2`` Hz. With probability
``correlation`` the EXG shares the EEG latent, otherwise it gets a freshly
drawn, independent one.

Noise is white Gaussian at ``noise_sigma`` plus one distractor per recording:
the same modality's rendering of an independently drawn latent (random
class, offset and envelope), scaled by ``INTERFERENCE_GAIN * noise_sigma * |z|``.
Within one modality a loud distractor is indistinguishable from the class
rhythm; the distractors of the two modalities are independent, so the rhythm
present in both identifies the class.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .sigcore import LabeledPair, Modality, Recording, patch_length

INTERFERENCE_GAIN = 2.5
ENVELOPE_RANGE = (0.4, 1.6)


@dataclass
class SynthConfig:
    n_pairs: int = 300
    n_classes: int = 3
    eeg_channels: int = 4
    exg_channels: int = 2
    rate_eeg_hz: float = 128.0
    rate_exg_hz: float = 256.0
    duration_sec: float = 30.0
    correlation: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0
    window_sec: float = 5.0
    n_subjects: int = 10
    exg_modality: str = "ECG"

    def __post_init__(self):
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be >= 0")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.eeg_channels < 1 or self.exg_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError(f"correlation must lie in [0, 1], got {self.correlation}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        Modality(self.exg_modality)
        if self.exg_modality == "EEG":
            raise ValueError("exg_modality must be a non-EEG modality")
        for rate in (self.rate_eeg_hz, self.rate_exg_hz):
            m = patch_length(self.window_sec, rate)
            if m < 2 or int(round(self.duration_sec * rate)) // m < 2:
                raise ValueError(
                    f"duration {self.duration_sec}s with window {self.window_sec}s at {rate} Hz gives fewer than 2 patches"
                )
        top = 4 + 3 * (self.n_classes - 1) + 1
        if 2 * top >= self.rate_eeg_hz / 2:
            raise ValueError(f"{self.n_classes} classes do not fit below the EEG Nyquist frequency")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {', '.join(unknown)}")
        return cls(**d)


def eeg_frequency(k: int, delta: float) -> float:
    return 4.0 + 3.0 * k + delta


def exg_fundamental(k: int, delta: float) -> float:
    return 2.0 + 1.5 * k + 0.5 * delta


def _latent(rng: np.random.Generator, cfg: SynthConfig, n_windows: int) -> dict:
    return {
        "k": int(rng.integers(cfg.n_classes)),
        "delta": float(rng.uniform(-1.0, 1.0)),
        "envelope": rng.uniform(*ENVELOPE_RANGE, size=n_windows),
    }


def _window_centres(cfg: SynthConfig) -> np.ndarray:
    return (np.arange(int(np.ceil(cfg.duration_sec / cfg.window_sec))) + 0.5) * cfg.window_sec


def _envelope(levels: np.ndarray, t: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    return np.interp(t, _window_centres(cfg), levels)


def _noise(rng, cfg: SynthConfig, t: np.ndarray, n_ch: int, render) -> np.ndarray:
    white = rng.standard_normal((n_ch, t.size))
    amp = INTERFERENCE_GAIN * abs(rng.standard_normal())
    distractor = render(rng, cfg, _latent(rng, cfg, len(_window_centres(cfg))), t)
    return cfg.noise_sigma * (white + amp * distractor)


def _eeg(rng, cfg: SynthConfig, lat: dict, t: np.ndarray) -> np.ndarray:
    f = eeg_frequency(lat["k"], lat["delta"])
    gain = rng.uniform(0.7, 1.3, size=(cfg.eeg_channels, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(cfg.eeg_channels, 2))
    wave = np.sin(2 * np.pi * f * t + phase[:, :1]) + 0.3 * np.sin(2 * np.pi * 2 * f * t + phase[:, 1:])
    return gain * wave * _envelope(lat["envelope"], t, cfg)


def _exg(rng, cfg: SynthConfig, lat: dict, t: np.ndarray) -> np.ndarray:
    f0 = exg_fundamental(lat["k"], lat["delta"])
    gain = rng.uniform(0.7, 1.3, size=(cfg.exg_channels, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(cfg.exg_channels, 1))
    wave = sum(np.sin(2 * np.pi * h * f0 * t + h * phase) / h for h in range(1, 5))
    return gain * wave * _envelope(lat["envelope"], t, cfg)


def generate_pair(cfg: SynthConfig, index: int) -> LabeledPair:
    """Pair ``index`` depends only on (seed, index), so ranges can be built independently."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    n_windows = len(_window_centres(cfg))
    lat_eeg = _latent(rng, cfg, n_windows)
    coupled = bool(rng.random() < cfg.correlation)
    lat_exg = lat_eeg if coupled else _latent(rng, cfg, n_windows)

    t_eeg = np.arange(int(round(cfg.duration_sec * cfg.rate_eeg_hz))) / cfg.rate_eeg_hz
    t_exg = np.arange(int(round(cfg.duration_sec * cfg.rate_exg_hz))) / cfg.rate_exg_hz
    eeg = _eeg(rng, cfg, lat_eeg, t_eeg) + _noise(rng, cfg, t_eeg, cfg.eeg_channels, _eeg)
    exg = _exg(rng, cfg, lat_exg, t_exg) + _noise(rng, cfg, t_exg, cfg.exg_channels, _exg)

    subject = f"S{index % cfg.n_subjects:03d}"
    return LabeledPair(
        eeg=Recording(Modality.EEG, cfg.rate_eeg_hz, eeg, subject, [f"EEG{c}" for c in range(cfg.eeg_channels)]),
        exg=Recording(
            Modality(cfg.exg_modality), cfg.rate_exg_hz, exg, subject,
            [f"{cfg.exg_modality}{c}" for c in range(cfg.exg_channels)],
        ),
        label=lat_eeg["k"],
        pair_id=f"p{index:05d}",
        meta={"eeg_class": lat_eeg["k"], "exg_class": lat_exg["k"], "coupled": coupled},
    )


def generate(cfg: SynthConfig) -> list[LabeledPair]:
    return [generate_pair(cfg, i) for i in range(cfg.n_pairs)]


def psd_peak_classify(rec: Recording, n_classes: int) -> int:
    """Learning-free baseline: nearest class frequency to the strongest EEG peak."""
    from .spectral import freqs, psd

    spec = psd(rec.data).mean(axis=0)
    f = freqs(rec.n_samples, rec.rate_hz)
    peak = f[np.argmax(np.where((f > 1.0) & (f < 20.0), spec, 0.0))]
    centres = np.array([eeg_frequency(k, 0.0) for k in range(n_classes)])
    return int(np.argmin(abs(centres - peak)))
