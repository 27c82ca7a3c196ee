import pytest

from blindflip.data import load_toy_dataset
from blindflip.harness import TrainConfig, train
from blindflip.model import build_model
from blindflip.quant import quantize_model


@pytest.fixture(scope="session")
def blobs():
    return load_toy_dataset("blobs4", 2000, seed=0)


@pytest.fixture(scope="session")
def victim(blobs):
    """Desk-scale trained victim shared across tests; never mutate it."""
    model = build_model("cnn2", blobs.input_shape, blobs.num_classes, seed=0)
    train(model, blobs, TrainConfig(epochs=10, seed=0))
    return model


@pytest.fixture(scope="session")
def qvictim(victim):
    return quantize_model(victim, 8)
