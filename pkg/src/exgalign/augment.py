"""Sampling-rate augmentation of EXG patches (2x up, 1/2 down).

Both functions operate on the last axis, so they accept a single patch
[C, M] or a stack of them [..., C, M].
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .sigcore import FIR_TAPS, design_lowpass, fir_filter

# anti-alias cutoff as a fraction of the output Nyquist frequency
ANTIALIAS_FRACTION = 0.45


@lru_cache(maxsize=1)
def _antialias_taps() -> np.ndarray:
    # input Nyquist = 1; output Nyquist = 0.5
    return design_lowpass(ANTIALIAS_FRACTION * 0.5, fs=2.0, numtaps=FIR_TAPS)


def upsample2x(patch: np.ndarray) -> np.ndarray:
    """Linear interpolation at half-sample positions; the last value is repeated."""
    x = np.asarray(patch, dtype=np.float64)
    m = x.shape[-1]
    if m < 2:
        raise ValueError(f"upsample2x needs M >= 2, got {m}")
    out = np.empty(x.shape[:-1] + (2 * m,))
    out[..., 0::2] = x
    out[..., 1:-1:2] = 0.5 * (x[..., :-1] + x[..., 1:])
    out[..., -1] = x[..., -1]
    return out


def downsample2x(patch: np.ndarray) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    m = x.shape[-1]
    if m < 4:
        raise ValueError(f"downsample2x needs M >= 4, got {m}")
    smoothed = fir_filter(x, _antialias_taps())
    return smoothed[..., 0 : 2 * (m // 2) : 2]
