import numpy as np
import pytest

from drivesynth.model import BackboneConfig, LatentVideo, TextEmbedding, build_model


@pytest.fixture(scope="session")
def tiny_config():
    """Small enough for finite differences, all 10 sites per block live."""
    return BackboneConfig(
        frames=2, height=8, width=8, channels=2, cond_channels=1,
        patch=(1, 4, 4), embed_dim=16, blocks=2, heads=2,
        ffn_hidden=32, text_width=8, ref_tokens=2,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=3)


@pytest.fixture(scope="session")
def desk_config():
    return BackboneConfig()


@pytest.fixture(scope="session")
def desk_model(desk_config):
    return build_model(desk_config, seed=101)


def make_inputs(config, seed=0):
    """Random forward-pass inputs consistent with a config."""
    rng = np.random.default_rng(seed)
    shape = (config.frames, config.height, config.width, config.channels)
    x = LatentVideo(rng.normal(size=shape), role="noisy_state")
    cond = LatentVideo(
        rng.uniform(size=shape[:3] + (config.cond_channels,)), role="condition"
    )
    text = TextEmbedding(rng.normal(size=(3, config.text_width)))
    ref_img = rng.normal(size=(config.height, config.width, config.channels))
    return x, cond, text, ref_img


@pytest.fixture()
def tiny_inputs(tiny_config):
    return make_inputs(tiny_config, seed=0)
