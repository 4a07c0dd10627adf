"""Signal containers, preprocessing and time-window patching."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import signal as sp_signal

FIR_TAPS = 101


class Modality(str, Enum):
    EEG = "EEG"
    EOG = "EOG"
    ECG = "ECG"
    EMG = "EMG"


@dataclass(frozen=True)
class Recording:
    """One modality's multi-channel signal, stored channels x samples."""

    modality: Modality
    rate_hz: float
    data: np.ndarray
    subject_id: str = ""
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ValueError(f"recording data must be 2-D (channels x samples), got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"recording needs at least one channel and one sample, got shape {data.shape}")
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "modality", Modality(self.modality))
        names = list(self.channel_names) or [f"ch{i}" for i in range(data.shape[0])]
        if len(names) != data.shape[0]:
            raise ValueError(f"{len(names)} channel names for {data.shape[0]} channels")
        object.__setattr__(self, "channel_names", names)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.n_samples / self.rate_hz

    def with_data(self, data: np.ndarray) -> "Recording":
        return replace(self, data=data)


@dataclass(frozen=True)
class PatchGrid:
    """A recording cut into P consecutive patches, shape [P, C, M]."""

    patches: np.ndarray
    window_sec: float
    rate_hz: float

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[2]


@dataclass(frozen=True)
class LabeledPair:
    """Simultaneous EEG and EXG recordings of one physiological process."""

    eeg: Recording
    exg: Recording
    label: int | None = None
    pair_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eeg.subject_id != self.exg.subject_id:
            raise ValueError(
                f"pair {self.pair_id!r}: subject mismatch ({self.eeg.subject_id!r} vs {self.exg.subject_id!r})"
            )
        tol = 1.0 / min(self.eeg.rate_hz, self.exg.rate_hz)
        if abs(self.eeg.duration_sec - self.exg.duration_sec) > tol + 1e-12:
            raise ValueError(
                f"pair {self.pair_id!r}: durations differ by more than one sample period "
                f"({self.eeg.duration_sec:.6f}s vs {self.exg.duration_sec:.6f}s)"
            )

    @property
    def subject_id(self) -> str:
        return self.eeg.subject_id


def _check_finite(rec: Recording) -> None:
    bad = ~np.isfinite(rec.data).all(axis=1)
    if bad.any():
        ch = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-finite values in channel {ch} ({rec.channel_names[ch]!r})")


def zscore(rec: Recording, eps: float = 1e-8) -> Recording:
    """Per-channel z-score with the population (1/N) standard deviation.

    Channels whose std falls below ``eps`` become all zeros.
    """
    _check_finite(rec)
    mean = rec.data.mean(axis=1, keepdims=True)
    std = rec.data.std(axis=1, keepdims=True)
    flat = std < eps
    out = np.where(flat, 0.0, (rec.data - mean) / np.where(flat, 1.0, std))
    return rec.with_data(out)


def design_lowpass(cutoff: float, fs: float = 2.0, numtaps: int = FIR_TAPS) -> np.ndarray:
    """Hamming-windowed sinc low-pass kernel with unit DC gain."""
    return sp_signal.firwin(numtaps, cutoff, window="hamming", fs=fs)


def fir_filter(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase filtering along the last axis with reflection padding.

    The kernel is symmetric, so a centred 'valid' convolution has no delay.
    """
    half = len(taps) // 2
    x = np.asarray(x, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    xp = np.pad(x, pad, mode="reflect") if x.shape[-1] > 1 else np.pad(x, pad, mode="edge")
    kernel = taps.reshape((1,) * (x.ndim - 1) + (-1,))
    return sp_signal.fftconvolve(xp, kernel, mode="valid", axes=-1)


def lowpass(rec: Recording, cutoff_hz: float) -> Recording:
    nyquist = rec.rate_hz / 2
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz for rate {rec.rate_hz} Hz")
    taps = design_lowpass(cutoff_hz, fs=rec.rate_hz)
    return rec.with_data(fir_filter(rec.data, taps))


def patch_length(window_sec: float, rate_hz: float) -> int:
    return int(round(window_sec * rate_hz))


def patchify(rec: Recording, window_sec: float) -> PatchGrid:
    """Split into non-overlapping windows from the start; the remainder is dropped."""
    m = patch_length(window_sec, rec.rate_hz)
    if m < 2:
        raise ValueError(f"window {window_sec}s at {rec.rate_hz} Hz gives patch length {m} < 2")
    p = rec.n_samples // m
    if p == 0:
        raise ValueError(
            f"window of {m} samples is longer than the recording ({rec.n_samples} samples): P = 0"
        )
    kept = rec.data[:, : p * m]
    patches = kept.reshape(rec.n_channels, p, m).transpose(1, 0, 2).copy()
    return PatchGrid(patches=patches, window_sec=window_sec, rate_hz=rec.rate_hz)
