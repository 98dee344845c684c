import numpy as np
import pytest

from config import TINY_PRESET
from dataset import generate_dataset
from schemas import Box, ExperimentConfig, WorldSpec

SQUARE_ROAD = [(-30.0, -30.0), (30.0, -30.0), (30.0, 30.0), (-30.0, 30.0)]


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return TINY_PRESET


@pytest.fixture
def empty_world() -> WorldSpec:
    return WorldSpec(seed=0, extent_m=60.0, obstacles=[], road_waypoints=SQUARE_ROAD)


@pytest.fixture
def box_world() -> WorldSpec:
    """One 2 m cube whose near face sits 9 m ahead of an ego at the origin."""
    box = Box(center_m=(10.0, 0.0, 1.0), size_m=(2.0, 2.0, 2.0), albedo_rgb=(0.8, 0.2, 0.2))
    return WorldSpec(seed=0, extent_m=60.0, obstacles=[box], road_waypoints=SQUARE_ROAD)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Tiny dataset shared by the harness tests; generated once per session."""
    root = tmp_path_factory.mktemp("data")
    generate_dataset(TINY_PRESET, root)
    return root
