import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# module-level loggers are created at import time
os.environ.setdefault("ROUTEFUSE_LOG_DIR", tempfile.mkdtemp(prefix="routefuse-logs-"))

import numpy as np
import pytest

from ingestion.scene_generator import generate_scene
from ingestion.vocabulary import WeatherVocabulary
from ingestion.weather_profiles import build_profiles
from modules.config import RunConfig, preset_config


def make_tiny_config(seed: int = 0) -> RunConfig:
    """12 x 12 x 4 grid with 4-channel layers; small enough for finite differences"""
    config = preset_config("desk")
    config.run.seed = seed
    config.grid.x_range = (0.0, 9.6)
    config.grid.y_range = (-4.8, 4.8)
    config.grid.z_range = (-2.0, 1.2)
    config.grid.voxel_size = 0.8
    config.model.token_dim = 8
    config.model.channels = (4, 4, 4)
    config.model.bev_channels = 4
    config.model.visual_channels = (4, 4, 4)
    config.model.image_height = 8
    config.model.image_width = 8
    config.model.knn_base = 8
    config.sim.max_cars = 1
    config.sim.ground_points = 40
    config.sim.lidar_density = 3.0
    config.sim.radar_clutter_points = 5
    config.data.train_per_category = 1
    config.data.test_per_category = 1
    config.optim.epochs = 1
    config.optim.batch_size = 2
    return config.validate()


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def tiny_vocab(tiny_config):
    return WeatherVocabulary.build(tiny_config.model.token_dim, tiny_config.sim.vocab_seed)


@pytest.fixture
def tiny_scenes(tiny_config, tiny_vocab):
    """One scene per weather category"""
    profiles = build_profiles(tiny_config.sim)
    roi = tiny_config.grid.roi()
    shape = (tiny_config.model.image_height, tiny_config.model.image_width)
    return [generate_scene(100 + i, roi, profile, 1, tiny_vocab, tiny_config.sim, shape)
            for i, profile in enumerate(profiles.values())]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
