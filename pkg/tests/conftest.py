import numpy as np
import pytest

from plmodel.scene import Building, ReceiverGrid, TransmitterSite, load_scene, demo_scene_path, scene_from_buildings


def box(x0, y0, x1, y1, height=10.0, material="concrete"):
    return Building(((x0, y0), (x1, y0), (x1, y1), (x0, y1)), height, material)


@pytest.fixture(scope="session")
def demo_scene():
    return load_scene(demo_scene_path())


@pytest.fixture
def empty_scene():
    return scene_from_buildings([], (-200.0, -200.0, 200.0, 200.0), anchor=(22.311359, 39.102723))


@pytest.fixture
def small_grid():
    return ReceiverGrid((-100.0, -100.0, 100.0, 100.0), 25.0)


@pytest.fixture
def site():
    return TransmitterSite("A", (0.0, 0.0), 12.0, 5.0, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
