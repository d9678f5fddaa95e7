"""Shared fixtures: a small trained model + detector on synthetic data.

Module tests use a deliberately small configuration (8x8 images, K=4) so
the suite stays fast; the acceptance tests build the full-size default
experiment themselves.
"""

import numpy as np
import pytest

from oodlab import data, detectors, model


SMALL_SPEC = data.SyntheticSpec(
    num_classes=4,
    height=8,
    width=8,
    channels=3,
    latent_dim=8,
    separation=2.0,
    ood_mode="near",
    seed=7,
)


@pytest.fixture(scope="session")
def small_data():
    in_set, ood_set = data.generate_synthetic(SMALL_SPEC, 40)
    return in_set, ood_set


@pytest.fixture(scope="session")
def small_model(small_data):
    in_set, _ = small_data
    cfg = model.TrainConfig(epochs=25, batch_size=32, learning_rate=0.05, seed=7)
    return model.train(in_set, cfg, hidden_widths=(64, 32), embedding_dim=16)


@pytest.fixture(scope="session")
def small_detector(small_model, small_data):
    in_set, _ = small_data
    emb = data.EmbeddingDataset(model.embed_many(small_model, in_set.images), in_set.labels)
    return detectors.fit_gaussians(emb)


@pytest.fixture(scope="session")
def small_bank(small_model, small_data):
    in_set, ood_set = small_data
    return model.build_word_bank(small_model, in_set, ood_set)


def random_spd(rng, dim, jitter=1.0):
    a = rng.standard_normal((dim, dim))
    return a @ a.T + jitter * np.eye(dim)
