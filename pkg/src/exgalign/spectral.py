"""Single-segment Hann periodogram.

Normalisation: ``psd.sum(-1) == mean((w * x) ** 2)`` where ``w`` is the
symmetric Hann window of the patch length. Interior bins are
doubled to fold in negative frequencies; DC and Nyquist are left as-is.
"""
from __future__ import annotations

import numpy as np
import torch


def _fold(m: int) -> np.ndarray:
    scale = np.full(m // 2 + 1, 2.0)
    scale[0] = 1.0
    if m % 2 == 0:
        scale[-1] = 1.0
    return scale


def hann(m: int) -> np.ndarray:
    return np.hanning(m)


def psd(patch: np.ndarray) -> np.ndarray:
    """One-sided PSD along the last axis: [..., M] -> [..., M // 2 + 1]."""
    x = np.asarray(patch, dtype=np.float64)
    m = x.shape[-1]
    if m < 4:
        raise ValueError(f"PSD needs at least 4 samples, got {m}")
    spec = np.fft.rfft(x * hann(m), axis=-1)
    return (spec.real**2 + spec.imag**2) * _fold(m) / m**2


def psd_tensor(x: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`psd` for batched encoder inputs."""
    m = x.shape[-1]
    if m < 4:
        raise ValueError(f"PSD needs at least 4 samples, got {m}")
    w = torch.as_tensor(hann(m), dtype=x.dtype, device=x.device)
    fold = torch.as_tensor(_fold(m), dtype=x.dtype, device=x.device)
    spec = torch.fft.rfft(x * w, dim=-1)
    return (spec.real**2 + spec.imag**2) * fold / m**2


def windowed_power(patch: np.ndarray) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    return np.mean((x * hann(x.shape[-1])) ** 2, axis=-1)


def freqs(m: int, rate_hz: float) -> np.ndarray:
    return np.fft.rfftfreq(m, d=1.0 / rate_hz)
