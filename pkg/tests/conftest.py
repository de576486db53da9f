"""
Pytest fixtures for gradual-tta tests.

This module provides small datasets and tiny pre-trained networks. Training
fixtures are session-scoped so the fast suite pays for them once.
"""

from pathlib import Path

import pytest


@pytest.fixture(scope="session")
def tiny_data():
    """A 4-class, 16x16 synthetic dataset with 96 images."""
    from gradual_tta.toy_data import generate_dataset

    return generate_dataset(seed=0, class_count=4, samples=96, side=16)


@pytest.fixture(scope="session")
def tiny_training(tiny_data):
    """Source training result of a narrow classifier on tiny_data."""
    from gradual_tta.networks import train_source

    return train_source(tiny_data, epochs=2, lr=1e-3, seed=0, batch_size=32, widths=(8, 16, 16))


@pytest.fixture
def tiny_model(tiny_training):
    """A fresh copy of the tiny source model (tests may mutate it)."""
    import copy

    return copy.deepcopy(tiny_training.model)


@pytest.fixture(scope="session")
def tiny_style_config():
    """Style settings small enough for unit tests."""
    from gradual_tta.style_transfer import StyleConfig

    return StyleConfig(
        capacity=4,
        pretrain_iters=10,
        encoder_iters=10,
        batch_size=8,
        widths=(4, 8),
    )


@pytest.fixture(scope="session")
def tiny_style_training(tiny_data, tiny_style_config):
    """Pre-trained tiny style network and its decoder losses."""
    from gradual_tta.style_transfer import pretrain_style_network

    return pretrain_style_network(tiny_data, tiny_style_config, seed=0)


@pytest.fixture
def tiny_style(tiny_style_training):
    """A fresh copy of the tiny style network."""
    import copy

    return copy.deepcopy(tiny_style_training[0])


@pytest.fixture
def test_batch(tiny_data):
    """Sixteen noisy test images."""
    from gradual_tta.models import CorruptionSpec
    from gradual_tta.toy_data import apply_corruption

    return apply_corruption(
        tiny_data.images[:16], CorruptionSpec("gaussian_noise", 5), seed=3
    )


@pytest.fixture
def adapt_config():
    """Adapt settings sized for tiny_data."""
    from gradual_tta.engine import AdaptConfig

    config = AdaptConfig(method="gtta_mix", lr=1e-3, batch_size_test=8, batch_size_source=8)
    config.style.capacity = 4
    return config


@pytest.fixture
def small_experiment(tmp_path: Path):
    """A complete experiment config that runs in seconds."""
    from gradual_tta.config import ExperimentConfig

    config = ExperimentConfig(name="small", output_dir=str(tmp_path / "out"))
    config.dataset.class_count = 3
    config.dataset.train_samples = 60
    config.dataset.test_samples = 30
    config.dataset.side = 16
    config.source.epochs = 1
    config.source.batch_size = 20
    config.source.widths = (4, 8, 8)
    config.schedule.kinds = ["gaussian_noise", "contrast"]
    config.schedule.batches_per_domain = 1
    config.adapt.lr = 1e-3
    config.adapt.batch_size_test = 10
    config.adapt.batch_size_source = 6
    config.sweep.methods = ["source", "bn1", "gtta_mix"]
    config.seeds = [0]
    return config


@pytest.fixture
def runner():
    """Click test runner."""
    from click.testing import CliRunner

    return CliRunner()
