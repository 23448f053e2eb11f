"""Pytest configuration and shared fixtures for testing."""

import logging

import numpy as np
import pytest

from vecmap.models.config import NoiseConfig, RunConfig, preset_config
from vecmap.models.schemas import GridSpec, MapClass, MapElement, Polyline, VectorMap
from vecmap.numerics.tensor import set_training
from vecmap.services.synthdata import build_dataset

# Configure logging for tests
logging.basicConfig(level=logging.DEBUG)


@pytest.fixture(autouse=True)
def inference_mode():
    """Every test starts (and ends) with dropout disabled."""
    set_training(False)
    yield
    set_training(False)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    """Tiny preset: 16x8 grid at 1 m, hidden 8, one layer per stage."""
    return preset_config("tiny")


@pytest.fixture
def tiny_grid(tiny_cfg) -> GridSpec:
    """Token grid of the tiny preset (origin at (-8, -4))."""
    return tiny_cfg.grid


@pytest.fixture
def unit_grid() -> GridSpec:
    """10x10 grid of 1 m cells with origin (0, 0)."""
    return GridSpec(width_cells=10, height_cells=10, cell_m=1.0, origin=(0.0, 0.0))


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def divider() -> MapElement:
    """Open divider crossing the tiny extent left to right."""
    return MapElement(
        label=MapClass.DIVIDER,
        polyline=Polyline.from_points([(-6.0, 0.5), (-1.0, 1.0), (5.0, 1.5)]),
    )


@pytest.fixture
def boundary() -> MapElement:
    """Open road boundary near the bottom of the tiny extent."""
    return MapElement(
        label=MapClass.BOUNDARY,
        polyline=Polyline.from_points([(-7.0, -3.0), (0.0, -2.5), (7.0, -3.0)]),
    )


@pytest.fixture
def crossing() -> MapElement:
    """Closed pedestrian crossing (counter-clockwise, repeated first vertex)."""
    ring = [(1.0, -1.0), (3.0, -1.0), (3.0, 2.0), (1.0, 2.0), (1.0, -1.0)]
    return MapElement(label=MapClass.PED_CROSSING, polyline=Polyline.from_points(ring, True))


@pytest.fixture
def toy_map(divider, boundary, crossing) -> VectorMap:
    """One scene with one element of every class."""
    return VectorMap(scene_id="toy", elements=(boundary, divider, crossing))


@pytest.fixture
def tiny_dataset(tmp_path, tiny_cfg):
    """Four clean tiny scenes, split 2 train / 2 val."""
    root = tmp_path / "data"
    build_dataset(
        root,
        4,
        seed=0,
        split_ratios=(0.5, 0.5),
        scene_cfg=tiny_cfg.scene,
        noise_cfg=NoiseConfig.clean(),
        grid=tiny_cfg.grid,
    )
    return root


@pytest.fixture
def tiny_run_cfg(tiny_cfg, tiny_dataset) -> RunConfig:
    """Tiny preset pointed at the temporary dataset with a few training steps."""
    flat = tiny_cfg.to_flat()
    flat.update(
        {
            "dataset_dir": str(tiny_dataset),
            "steps_stage1": 3,
            "steps_stage2": 2,
            "log_every": 1,
            "dropout": 0.0,
        }
    )
    return RunConfig.from_flat(flat)
