import numpy as np
import pytest

from standin import write_digits_idx
from tnasnn.config import TrainConfig
from tnasnn.data import load_dataset


@pytest.fixture(scope="session")
def digits_root(tmp_path_factory):
    return write_digits_idx(tmp_path_factory.mktemp("digits"))


@pytest.fixture(scope="session")
def digits(digits_root):
    return load_dataset("fashion_mnist", digits_root, "train")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smoke_config(digits_root, tmp_path):
    """A few-second run on the digit stand-in with a compressible middle layer."""
    return TrainConfig(dataset="fashion_mnist", arch="64FC-32FC-Out", epochs=2, batch_size=128,
                       data_root=str(digits_root), train_limit=400, test_limit=200, augment=False,
                       alpha_match=0.3, out_dir=str(tmp_path / "run"))
