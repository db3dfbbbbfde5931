import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from opendet import geom
from opendet.synthscene import SceneConfig, dataset_from_scenes, generate_dataset

settings.register_profile("opendet", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("opendet")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return SceneConfig(channels=8, height=8, width=12, min_boxes=1, max_boxes=3)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return dataset_from_scenes(tiny_cfg, generate_dataset(tiny_cfg, 5, 4, workers=1))


def random_camera(rng):
    """Random rigid extrinsic plus a well-conditioned intrinsic."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])
    e = np.eye(4)
    e[:3, :3] = rot
    e[:3, 3] = rng.uniform(-5, 5, size=3)
    k = geom.pinhole_intrinsic(*rng.uniform(10, 80, size=2), *rng.uniform(5, 40, size=2))
    return geom.CameraParams(k, e)
