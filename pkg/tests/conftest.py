import numpy as np
import pytest
import torch

from facebound import datapipe as dp
from facebound.config import RunConfig
from facebound.models import ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(resolution=32, z_dim=16, c_b=8, d_id=8, ch=4, id_classes=3)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig(resolution=32, ch=4, z_dim=16, c_b=8, d_id=8, batch_size=4, max_steps=6,
                     ckpt_every=3, log_every=1, ckpt_dir=str(tmp_path / "ck"), out_dir=str(tmp_path / "out"))


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return dp.make_toy_fixture(root, n_identities=4, per_illumination=5, image_size=64, n_test_identities=1)


@pytest.fixture(scope="session")
def toy_arrays(toy_manifest):
    records, _ = dp.load_manifest(toy_manifest)
    return dp.arrays_from_manifest(records, 32)


@pytest.fixture(scope="session")
def synth_arrays():
    data = dp.arrays_from_synthetic(dp.generate_synthetic_dataset(dp.SyntheticTemplateSpec(n_identities=3), 60))
    data.split[48:] = "val"
    return data


def rng(seed=0):
    return np.random.default_rng(seed)
