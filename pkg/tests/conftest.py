"""Shared fixtures: synthetic datasets and trained models, one per session.

Everything here is deterministic (fixed seeds), so any test that consumes
these fixtures sees identical models across runs. The large fixtures (GAN,
autoencoder, full stats scan) take tens of seconds to build; they are session
scoped and shared between the unit tests and the acceptance suite.
"""

import pytest

from dpmdce.data import synthesize_digits
from dpmdce.engine import make_context
from dpmdce.featstat import build_stats
from dpmdce.zoo import GanConfig, TrainConfig, train_autoencoder, train_blackbox, train_gan

# acceptance-scale synthetic splits
N_TRAIN = 6000
N_TEST = 1500


@pytest.fixture(scope="session")
def train_data():
    return synthesize_digits(N_TRAIN, 0)


@pytest.fixture(scope="session")
def test_data():
    return synthesize_digits(N_TEST, 101, "test")


# smaller splits for the cheap unit tests
@pytest.fixture(scope="session")
def tiny_train():
    return synthesize_digits(1200, 0)


@pytest.fixture(scope="session")
def tiny_test():
    return synthesize_digits(400, 101, "test")


@pytest.fixture(scope="session")
def tiny_bb(tiny_train, tiny_test):
    return train_blackbox(5, tiny_train, tiny_test, TrainConfig(epochs=4, seed=0))


@pytest.fixture(scope="session")
def tiny_stats(tiny_bb, tiny_train):
    return build_stats(tiny_bb, tiny_train, sample_cap=500)


@pytest.fixture(scope="session")
def blackbox5(train_data, test_data):
    return train_blackbox(5, train_data, test_data, TrainConfig(epochs=8, seed=0))


@pytest.fixture(scope="session")
def gan_models(train_data):
    return train_gan(train_data, GanConfig(epochs=25, seed=0))


@pytest.fixture(scope="session")
def autoencoder(train_data, test_data):
    return train_autoencoder(train_data, test_data, TrainConfig(epochs=6, seed=0))


@pytest.fixture(scope="session")
def stats5(blackbox5, train_data):
    return build_stats(blackbox5, train_data)


@pytest.fixture(scope="session")
def ctx5(blackbox5, gan_models, autoencoder, stats5, train_data):
    generator, _ = gan_models
    encoder, decoder = autoencoder
    return make_context(blackbox5, generator, encoder, decoder, stats5, train_data)
