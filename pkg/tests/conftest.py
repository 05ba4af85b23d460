import functools

import numpy as np
import pytest
from hypothesis import settings

from epiflow.geometry import CameraIntrinsics, NormalizedCorrespondenceSet, so3_exp
from epiflow.synth import SceneConfig, generate_scene

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def scene(**kw):
    return generate_scene(SceneConfig(**kw))


def random_pose(rng, angle=0.3):
    axis = rng.normal(size=3)
    R = so3_exp(axis / np.linalg.norm(axis) * rng.uniform(0.0, angle))
    t = rng.normal(size=3)
    return R, t / np.linalg.norm(t)


def random_correspondences(rng, R, t, n, depth=(2.0, 10.0), spread=0.5):
    """Noise-free normalized correspondences of random points in front of both cameras."""
    pts = []
    while len(pts) < n:
        X = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), 1.0]) * rng.uniform(*depth)
        X2 = R @ X + t
        if X2[2] > 0.1:
            pts.append((X, X2))
    X1 = np.array([p[0] for p in pts])
    X2 = np.array([p[1] for p in pts])
    return NormalizedCorrespondenceSet(X1 / X1[:, 2:3], X2 / X2[:, 2:3])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def noisy_scene():
    return scene(noise_sigma=0.5, outlier_fraction=0.3, num_points=400, rng_seed=4,
                 translation_mode="uniform", width=640, height=480, fx=1600.0, fy=1600.0,
                 depth_min=3.0, depth_max=30.0)


@pytest.fixture
def clean_scene():
    return scene(num_points=400, rng_seed=2)


@pytest.fixture
def K():
    return CameraIntrinsics(718.856, 718.856, 607.1928, 185.2157)
