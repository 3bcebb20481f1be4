import numpy as np
import pytest
import torch

from msba_clip.dataset import SyntheticConfig, generate_synthetic_corpus
from msba_clip.model import ModelConfig


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """12 groups of 32x32 images, four methods."""
    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(SyntheticConfig(12, (32, 32), 4, seed=3), out)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(image_size=(16, 16), patch_size=4, d_v=16, d_t=8, depth=2, heads=2, mip_hidden=16,
                       text_heads=2, num_methods=4, decoder_width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY_TRAIN = {
    "model": {"image_size": [32, 32], "patch_size": 8, "d_v": 16, "d_t": 8, "depth": 1, "heads": 2,
              "mip_hidden": 16, "text_heads": 2, "text_depth": 1, "decoder_width": 8, "num_fake_prompts": 4},
    "batch_size": 6,
    "epochs": 2,
    "lr_init": 1e-3,
    "lr_final": 1e-5,
}


@pytest.fixture
def tiny_train_config():
    from msba_clip.train import TrainConfig

    return TrainConfig().updated(TINY_TRAIN)


@pytest.fixture(scope="session")
def trained_tiny(small_corpus, tmp_path_factory):
    """One tiny training run shared by the evaluation tests."""
    from msba_clip.train import TrainConfig, train

    out = tmp_path_factory.mktemp("run")
    return train(TrainConfig().updated(TINY_TRAIN), small_corpus, out)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
