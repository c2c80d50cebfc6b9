import os
from pathlib import Path

import numpy as np
import pytest

from core.conditioning import Vocabulary
from core.rdit import ModelConfig, RDiT
from core.scene_parser import SceneParser


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs; set RDIT_RUN_SLOW=1 to enable")


def pytest_collection_modifyitems(config, items):
    if os.getenv("RDIT_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set RDIT_RUN_SLOW=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# fixtures

@pytest.fixture
def rng():
    yield np.random.default_rng(1234)


@pytest.fixture
def vocab():
    return Vocabulary.default()


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=24, n_heads=2, n_layers=1, d_text=8, grid=(8, 8), k_hoi=24, l_max=3, prompt_len=6)


@pytest.fixture
def tiny_model(tiny_config, vocab):
    return RDiT(tiny_config, len(vocab), np.random.default_rng(0))


def get_sample_path():
    return Path(__file__).parent / "sample_scenes.yaml"


@pytest.fixture
def sample_scenes():
    return SceneParser.from_file(get_sample_path()).scenes
