import numpy as np
import pytest
import torch

from exitvad import ModelConfig, build_model


@pytest.fixture(scope="session", autouse=True)
def _single_threaded_torch():
    # Bitwise reproducibility of forward/backward needs a fixed thread count.
    torch.set_num_threads(1)


def toy_config(**overrides) -> ModelConfig:
    """A few-thousand-parameter model on short 10-frame chunks."""
    base = dict(
        chunk_samples=4800,
        frames_per_chunk=10,
        sinc_filters=16,
        sinc_kernel=31,
        extractor_conv_channels=(4, 8),
        stage_channels=8,
        plain_widths=(16, 8),
        dc_widths=(24, 12, 8),
        lstm_hidden=8,
        mlp_hidden=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_model(toy_config(), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
