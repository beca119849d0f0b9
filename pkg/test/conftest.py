import numpy as np
import pytest

from ept.config import CliConfig, ProtocolSpec, TrainConfig
from ept.embedding_store import EmbeddingDataset, SynthSpec, generate_synthetic


@pytest.fixture
def tiny_protocol():
    return ProtocolSpec(base_classes=4, stages=2, ways=2, shots=3, test_per_class=5)


@pytest.fixture
def tiny_dataset():
    # 8 well separated classes, 20 samples each
    return generate_synthetic(SynthSpec(num_classes=8, dim=6, samples_per_class=20), seed=3)


@pytest.fixture
def fast_config(tiny_protocol):
    return CliConfig(
        protocol=tiny_protocol,
        train=TrainConfig(base_epochs=3, inc_epochs=3, batch_size=8, seed=0),
        threads=1,
        verbose=False,
    ).validate()


@pytest.fixture
def hand_dataset():
    features = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 1.0], [0.0, 3.0]])
    return EmbeddingDataset(features, [0, 0, 1, 1], num_classes=2)
