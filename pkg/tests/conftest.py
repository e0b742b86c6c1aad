import numpy as np
import pytest

from podseg.cloud import LabeledCloud, VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240911)


@pytest.fixture
def unit_grid():
    return VoxelGrid(origin=(0.0, 0.0, 0.0), voxel_size=(1.0, 1.0, 1.0), extent=(4, 4, 4))


@pytest.fixture
def random_cloud(rng):
    return LabeledCloud(coords=rng.uniform(0.05, 3.95, size=(200, 3)), id="random")
