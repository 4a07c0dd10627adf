"""Patch encoders.

The EXG encoder embeds every patch with two convolutional branches, one on
the raw samples and one on the log power spectrum, each ending in global
average pooling so that patches of length M, 2M and M/2 share one parameter
set. The concatenated per-patch features are contextualised by a pre-norm
Transformer over the P patch tokens of a sequence.

EEG encoders are pluggable: anything implementing :class:`EEGEncoder`
(``forward`` on a [B, P, C, M] tensor, ``d_patch`` attribute) can be used.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .sigcore import PatchGrid
from .spectral import psd_tensor

@dataclass
class EncoderConfig:
    d_patch: int = 256
    conv_channels: list[int] = field(default_factory=lambda: [64, 128])
    conv_kernel: int = 7
    conv_stride: int = 2
    transformer_layers: int = 2
    attention_heads: int = 4
    ff_multiplier: int = 4
    dropout: float = 0.1
    positional: bool = True

    def __post_init__(self):
        self.conv_channels = [int(c) for c in self.conv_channels]
        if not self.conv_channels:
            raise ValueError("conv_channels must not be empty")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be an odd positive integer, got {self.conv_kernel}")
        if self.d_patch % self.attention_heads:
            raise ValueError(f"d_patch={self.d_patch} not divisible by attention_heads={self.attention_heads}")
        if self.d_patch != 2 * self.conv_channels[-1]:
            raise ValueError(
                f"d_patch={self.d_patch} must equal twice the last conv width ({self.conv_channels[-1]})"
            )
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PatchEmbeddings:
    values: np.ndarray  # [P, D_p]

    @property
    def n_patches(self) -> int:
        return self.values.shape[0]


def _conv_branch(in_channels: int, cfg: EncoderConfig) -> nn.Sequential:
    layers: list[nn.Module] = []
    c = in_channels
    for width in cfg.conv_channels:
        layers += [
            nn.Conv1d(c, width, cfg.conv_kernel, stride=cfg.conv_stride, padding=cfg.conv_kernel // 2),
            nn.GELU(),
        ]
        c = width
    return nn.Sequential(*layers)


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


def log_spectrum(x: torch.Tensor) -> torch.Tensor:
    """log1p of the PSD scaled by the bin count; empty bins map to 0."""
    p = psd_tensor(x)
    return torch.log1p(p * p.shape[-1])


class ExgEncoder(nn.Module):
    """Dual-domain patch encoder: [B, P, C, M] -> [B, P, d_patch]."""

    def __init__(self, in_channels: int, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        self.in_channels = in_channels
        self.d_patch = cfg.d_patch
        self.time_branch = _conv_branch(in_channels, cfg)
        self.freq_branch = _conv_branch(in_channels, cfg)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_patch,
            nhead=cfg.attention_heads,
            dim_feedforward=cfg.ff_multiplier * cfg.d_patch,
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=cfg.transformer_layers, enable_nested_tensor=False
        )
        self.feature_norm = nn.LayerNorm(cfg.d_patch)
        self.norm = nn.LayerNorm(cfg.d_patch)

    def patch_features(self, x: torch.Tensor) -> torch.Tensor:
        b, p, c, m = x.shape
        if c != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} channels, got {c}")
        flat = x.reshape(b * p, c, m)
        t = self.time_branch(flat).mean(dim=-1)
        f = self.freq_branch(log_spectrum(flat)).mean(dim=-1)
        return torch.cat([t, f], dim=-1).reshape(b, p, -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] < 1:
            raise ValueError("cannot encode a grid with zero patches")
        tokens = self.feature_norm(self.patch_features(x))
        if self.cfg.positional:
            tokens = tokens + sinusoidal_positions(tokens.shape[1], tokens.shape[2], tokens.dtype)
        out = self.norm(self.transformer(tokens))
        return out[0] if squeeze else out


class EEGEncoder(nn.Module):
    """Plug-in contract for EEG encoders.

    Subclasses implement ``_forward`` on [B, P, C, M] tensors and set
    ``d_patch``. ``n_calls`` counts forward invocations.
    """

    d_patch: int

    def __init__(self):
        super().__init__()
        self.n_calls = 0

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.n_calls += 1
        return self._forward(x)

    def encode(self, grid: PatchGrid) -> PatchEmbeddings:
        return _encode_grid(self, grid)


class TinyEEGEncoder(EEGEncoder):
    """Bundled stand-in for a pretrained EEG model; same architecture as the EXG encoder."""

    def __init__(self, in_channels: int, cfg: EncoderConfig | None = None):
        super().__init__()
        self.body = ExgEncoder(in_channels, cfg)
        self.cfg = self.body.cfg
        self.in_channels = in_channels
        self.d_patch = self.body.d_patch

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ModuleEEGEncoder(EEGEncoder):
    """Adapter around an external module mapping [B, P, C, M] to [B, P, out_dim]."""

    def __init__(self, module: nn.Module, out_dim: int):
        super().__init__()
        self.module = module
        self.d_patch = int(out_dim)

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.module(x)
        if out.shape[-1] != self.d_patch:
            raise ValueError(f"wrapped EEG model emitted dimension {out.shape[-1]}, declared {self.d_patch}")
        return out


def _encode_grid(module: nn.Module, grid: PatchGrid) -> PatchEmbeddings:
    if grid.n_patches < 1:
        raise ValueError("cannot encode a grid with zero patches")
    param = next(module.parameters(), None)
    dtype = param.dtype if param is not None else torch.float32
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            out = module(torch.as_tensor(grid.patches, dtype=dtype).unsqueeze(0))[0]
    finally:
        module.train(was_training)
    return PatchEmbeddings(out.detach().cpu().numpy().astype(np.float64))


def exg_encode(grid: PatchGrid, encoder: ExgEncoder) -> PatchEmbeddings:
    return _encode_grid(encoder, grid)


def eeg_encode(grid: PatchGrid, encoder: EEGEncoder) -> PatchEmbeddings:
    return encoder.encode(grid)
