import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from hybridlt.config import TrainConfig  # noqa: E402
from hybridlt.data import LongTailSpec, synth_gaussian_longtail  # noqa: E402

TINY_MODEL = dict(hidden_dims=[8], feature_dim=6, projection_hidden=6, embedding_dim=4)

TINY_YAML = """\
data_num_classes: 3
data_input_dim: 4
data_n_max: 40
data_beta: 4
data_class_sep: 4.0
data_test_per_class: 10
epochs: 3
steps_per_epoch: 2
batch_size_sc: 16
batch_size_ce: 16
learning_rate: 0.05
hidden_dims: [8]
feature_dim: 6
projection_hidden: 6
embedding_dim: 4
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_data():
    """3 classes with 40 / 20 / 10 training rows, 4 input features"""
    return synth_gaussian_longtail(LongTailSpec(3, 40, 4.0), input_dim=4, class_sep=4.0, seed=0,
                                   test_per_class=20)


@pytest.fixture
def make_train_config():
    def factory(**overrides) -> TrainConfig:
        values = dict(epochs=4, steps_per_epoch=3, batch_size_sc=16, batch_size_ce=16,
                      learning_rate=0.05, seed=7, **TINY_MODEL)
        values.update(overrides)
        return TrainConfig(**values)
    return factory


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yml"
    path.write_text(TINY_YAML)
    return path
