import pytest
import torch

from mirage.config import AgentConfig, WorldModelConfig
from mirage.numerics import RngStreams


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture
def streams():
    return RngStreams(seed=1234)


@pytest.fixture
def tiny_wm_cfg():
    # Matches the finite-difference test scale: 8x8 frames, 4x4 latents.
    return WorldModelConfig(
        image_size=8, channels_base=4, categories=4, classes=4,
        feature_dim=16, layers=1, heads=2, dropout=0.0,
        train_context=8, inference_context=12,
    )


@pytest.fixture
def tiny_agent_cfg():
    return AgentConfig(hidden_dim=16)


def make_streams(seed: int) -> RngStreams:
    return RngStreams(seed=seed)
