"""Pytest configuration and fixtures for Mobile Portrait tests."""

from pathlib import Path

import numpy as np
import pytest

from mobile_portrait.config import Settings
from mobile_portrait.models import FrameJob, TrainConfig
from mobile_portrait.pipeline.engine import init_weights
from mobile_portrait.pipeline.presets import PresetConfig, get_preset
from mobile_portrait.training.data import SyntheticDataset, TrainSample, write_synthetic_job
from mobile_portrait.training.losses import build_perceptual_pyramid, perceptual_layers
from mobile_portrait.weights import ModelWeights


@pytest.fixture
def settings(tmp_path: Path) -> Settings:
    """Create test settings for the toy preset."""
    return Settings(
        preset="toy",
        resolution=64,
        seed=0,
        threads=1,
        bank_views=0,
        out_dir=tmp_path / "out",
        debug=True,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def toy_preset() -> PresetConfig:
    return get_preset("toy")


@pytest.fixture
def toy_weights(toy_preset: PresetConfig) -> ModelWeights:
    """Seeded toy weights including the training-only heads."""
    return init_weights(toy_preset, seed=0)


@pytest.fixture
def sample() -> TrainSample:
    """One synthetic 64x64 source/driving pair."""
    return SyntheticDataset(size=64, length=1, seed=0)[0]


@pytest.fixture
def pyramid() -> ModelWeights:
    return build_perceptual_pyramid()


@pytest.fixture
def smooth_pyramid() -> ModelWeights:
    """Perceptual pyramid with positive weights and biases.

    Features of a positive image are then kink-free and grow with every pixel.
    """
    rng = np.random.default_rng(7)
    weights = ModelWeights()
    for layer in perceptual_layers():
        weights.add(f"{layer.name}.weight", rng.uniform(0.01, 0.05, layer.weight_shape))
        weights.add(f"{layer.name}.bias", rng.uniform(0.01, 0.1, layer.out_channels))
    return weights


@pytest.fixture
def train_config() -> TrainConfig:
    return TrainConfig(seed=0, max_steps=1)


@pytest.fixture
def demo_job(tmp_path: Path) -> FrameJob:
    """A 10-frame synthetic animation job on disk."""
    return write_synthetic_job(tmp_path / "job", size=64, frames=10, seed=0)
