import numpy as np
import pytest
import torch
from torch import nn

from exgalign.align import AlignmentModel
from exgalign.encoder import (
    EncoderConfig,
    ExgEncoder,
    ModuleEEGEncoder,
    TinyEEGEncoder,
    eeg_encode,
    exg_encode,
)
from exgalign.sigcore import PatchGrid

from fdcheck import max_relative_error


def grid(p, c, m, seed=0):
    x = np.random.default_rng(seed).standard_normal((p, c, m))
    return PatchGrid(x, window_sec=1.0, rate_hz=float(m))


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert cfg.d_patch == 256 and cfg.conv_channels == [64, 128]
        assert (cfg.conv_kernel, cfg.conv_stride, cfg.attention_heads) == (7, 2, 4)

    @pytest.mark.parametrize("kw", [
        dict(d_patch=100),
        dict(d_patch=258, conv_channels=[64, 129], attention_heads=4),
        dict(conv_kernel=4),
        dict(dropout=1.0),
        dict(conv_channels=[]),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)


class TestExgEncode:
    def test_identical_patches_identical_rows_without_positions(self, small_cfg):
        small_cfg.positional = False
        torch.manual_seed(0)
        enc = ExgEncoder(2, small_cfg).double()
        x = np.random.default_rng(0).standard_normal((2, 32))
        out = exg_encode(PatchGrid(np.stack([x, x, x]), 1.0, 32.0), enc).values
        np.testing.assert_allclose(out[0], out[1], atol=1e-6)
        np.testing.assert_allclose(out[0], out[2], atol=1e-6)

    def test_patch_permutation_equivariant_without_positions(self, small_cfg):
        small_cfg.positional = False
        torch.manual_seed(1)
        enc = ExgEncoder(1, small_cfg).double()
        g = grid(4, 1, 32)
        perm = [2, 0, 3, 1]
        a = exg_encode(g, enc).values
        b = exg_encode(PatchGrid(g.patches[perm], 1.0, 32.0), enc).values
        np.testing.assert_allclose(b, a[perm], atol=1e-10)

    def test_length_agnostic(self):
        torch.manual_seed(0)
        enc = ExgEncoder(2)
        for m in (1280, 2560, 640):
            out = exg_encode(grid(3, 2, m), enc)
            assert out.values.shape == (3, 256)
            assert np.isfinite(out.values).all()

    def test_finite_at_extreme_lengths(self, mini_cfg):
        enc = ExgEncoder(1, mini_cfg)
        for m in (4, 5, 16, 2000):
            assert np.isfinite(exg_encode(grid(2, 1, m), enc).values).all()

    def test_channel_mismatch(self, mini_cfg):
        with pytest.raises(ValueError, match="channels"):
            exg_encode(grid(2, 3, 16), ExgEncoder(1, mini_cfg))

    def test_empty_grid(self, mini_cfg):
        with pytest.raises(ValueError, match="zero patches"):
            exg_encode(PatchGrid(np.zeros((0, 1, 16)), 1.0, 16.0), ExgEncoder(1, mini_cfg))

    def test_encode_restores_training_mode(self, mini_cfg):
        enc = ExgEncoder(1, mini_cfg).train()
        exg_encode(grid(2, 1, 16), enc)
        assert enc.training

    def test_golden_vector(self):
        cfg = EncoderConfig(d_patch=8, conv_channels=[4], transformer_layers=1, attention_heads=2,
                            ff_multiplier=2, dropout=0.0)
        torch.manual_seed(0)
        enc = ExgEncoder(1, cfg).double()
        x = np.sin(np.arange(64) / 3.0).reshape(2, 1, 32)
        out = exg_encode(PatchGrid(x, 1.0, 32.0), enc).values
        np.testing.assert_allclose(out, GOLDEN, atol=1e-5)

    def test_gradients_match_finite_differences(self, mini_cfg):
        torch.manual_seed(3)
        enc = ExgEncoder(1, mini_cfg).double().eval()
        x = torch.as_tensor(np.random.default_rng(0).standard_normal((1, 2, 1, 16)))
        w = torch.as_tensor(np.random.default_rng(1).standard_normal((1, 2, 8)))
        errors = max_relative_error(enc, lambda: (enc(x) * w).sum())
        assert max(errors.values()) < 1e-4, errors


class TestEEGEncoder:
    def test_stand_in_shape(self):
        torch.manual_seed(0)
        enc = TinyEEGEncoder(4)
        assert eeg_encode(grid(3, 4, 64), enc).values.shape == (3, 256)

    def test_stand_in_deterministic(self, small_cfg):
        torch.manual_seed(0)
        enc = TinyEEGEncoder(2, small_cfg)
        g = grid(3, 2, 40)
        np.testing.assert_array_equal(eeg_encode(g, enc).values, eeg_encode(g, enc).values)

    def test_call_counter(self, mini_cfg):
        enc = TinyEEGEncoder(1, mini_cfg)
        eeg_encode(grid(2, 1, 16), enc)
        eeg_encode(grid(2, 1, 16), enc)
        assert enc.n_calls == 2

    def test_adapter_dimension_mismatch_rejected_at_construction(self):
        external = ModuleEEGEncoder(nn.Linear(64, 512), out_dim=512)
        with pytest.raises(ValueError, match="512"):
            AlignmentModel(external, ExgEncoder(2), n_patches=3)

    def test_adapter_checks_emitted_dimension(self, mini_cfg):
        class Flat(nn.Module):
            def forward(self, x):
                return x.mean(dim=2)[..., :6]

        external = ModuleEEGEncoder(Flat(), out_dim=8)
        with pytest.raises(ValueError, match="emitted dimension 6"):
            eeg_encode(grid(2, 1, 16), external)

    def test_adapter_delegates(self):
        class Flat(nn.Module):
            def forward(self, x):
                return x.mean(dim=2)

        external = ModuleEEGEncoder(Flat(), out_dim=16)
        g = grid(3, 2, 16)
        np.testing.assert_allclose(eeg_encode(g, external).values, g.patches.mean(axis=1), atol=1e-6)
        AlignmentModel(external, ExgEncoder(1, EncoderConfig(d_patch=16, conv_channels=[8], attention_heads=2)), 3)


# captured from the first run after the finite-difference check passed
GOLDEN = np.array([
    [-0.9477977127, 0.5619884295, -0.8741679863, 2.1379654858,
     -0.7242986633, -0.1809222438, -0.6546037593, 0.6818364501],
    [-0.5014464978, 0.3276792696, -1.0617707823, 2.144707281,
     -0.6880647609, -0.1314801516, -0.8872119067, 0.7975875486],
])
