import numpy as np
import pytest
import torch

from exgalign.encoder import EncoderConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mini_cfg():
    """Miniature encoder used for gradient checks: D_p = 8."""
    return EncoderConfig(d_patch=8, conv_channels=[4], transformer_layers=2, attention_heads=2,
                         ff_multiplier=2, dropout=0.0)


@pytest.fixture
def small_cfg():
    return EncoderConfig(d_patch=16, conv_channels=[8], transformer_layers=1, attention_heads=2,
                         ff_multiplier=2, dropout=0.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
