import pytest
import torch

from slyolo import ModelConfig
from slyolo.data import generate_synthetic_dataset

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture
def tiny_cfg():
    """Small-width config for fast structural tests."""
    return ModelConfig(width=0.25, max_channels=256)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The seed-7, 16-image synthetic dataset (192 px canvas)."""
    root = tmp_path_factory.mktemp("synth7")
    generate_synthetic_dataset(root, seed=7, n_images=16, image_size=192)
    return root
