import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from advlidar.benchmark import generate_scene
from advlidar.gsa import AttackConfig
from advlidar.oracle import builtin_oracle
from advlidar.pointcloud import BoundingBox, Point3, PointCloud, Scene, save_scene

# property tests must not depend on run-to-run randomness
settings.register_profile("repo", derandomize=True, max_examples=60, deadline=None)
settings.load_profile("repo")

STUB = Path(__file__).parent / "stub_oracle.py"


def stub_command(*flags: str) -> str:
    parts = [sys.executable, str(STUB), *flags]
    return "exec:" + " ".join(parts)


@pytest.fixture(scope="session")
def bench_scene0():
    return generate_scene(0)


@pytest.fixture(scope="session")
def bench_scenes5():
    return [generate_scene(i) for i in range(5)]


@pytest.fixture
def voxel():
    return builtin_oracle("voxel0.2")


@pytest.fixture
def fast_cfg():
    """Small but structurally complete attack configuration."""
    return AttackConfig(
        population=6, generations=8, n0=6, anneal_steps=6,
        sigma=0.05, seed=11, elite_count=1,
    )


@pytest.fixture(scope="session")
def blob_scene():
    """Deterministic scene with a huge ground-truth box.

    The transcript stub always answers with a Car at the cloud centroid, and
    the box is wide enough to contain any centroid, so attacks against the
    stub can never succeed here. Useful for exercising exit paths.
    """
    rng = np.random.default_rng(404)
    xyz = np.array([5.0, 0.0, 0.0]) + rng.normal(0.0, 0.4, size=(30, 3))
    return Scene(
        background=PointCloud.empty(),
        target=PointCloud.from_xyz(xyz, intensity=0.5),
        label="Car",
        gt_box=BoundingBox(Point3(5.0, 0.0, 0.0), (50.0, 50.0, 50.0), 0.0),
        name="blob",
    )


@pytest.fixture
def scene_file(tmp_path):
    """Writer: scene -> on-disk JSON path inside tmp_path."""

    def write(scene, stem: str = "scene") -> Path:
        path = tmp_path / f"{stem}.json"
        save_scene(scene, path)
        return path

    return write
