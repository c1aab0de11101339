from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from oracles import plane_mesh

from meshcorrect.camera_geometry import Intrinsics, RigidTransform
from meshcorrect.config import RunConfig
from meshcorrect.datagen import CorruptionSpec, DatasetManifest, SceneSpec, build_dataset, default_camera
from meshcorrect.losses import edge_weight_map
from meshcorrect.rasterizer import rasterize, render_label
from meshcorrect.training import TrainingView, ViewGroup


@pytest.fixture(scope="session")
def camera() -> Intrinsics:
    """The default 96x288 dataset camera."""
    return default_camera()


@pytest.fixture
def small_camera() -> Intrinsics:
    return Intrinsics(40.0, 40.0, 16.0, 12.0, 32, 24)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def _tiny_scene(seed: int) -> SceneSpec:
    return SceneSpec(
        seed=seed,
        extent=12.0,
        resolution=0.5,
        boxes=2,
        panels=1,
        trajectory_length=1.2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory: pytest.TempPathFactory) -> DatasetManifest:
    """Two small scenes at 48x96 with every split populated."""
    root: Path = tmp_path_factory.mktemp("dataset")
    camera = Intrinsics(40.0, 40.0, 48.0, 24.0, 96, 48)
    try:
        return build_dataset(
            [_tiny_scene(1), _tiny_scene(2)],
            camera,
            root,
            CorruptionSpec(),
            spacing=0.1,
            progress=False,
        )
    except ValueError as exc:
        pytest.skip(f"tiny scene could not be generated: {exc}")


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    """Fast settings for the command-line tests: miniature network, a handful of steps."""
    return RunConfig().with_overrides(
        [
            "render.width=96",
            "render.height=48",
            "render.fx=40",
            "render.fy=40",
            "render.cx=48",
            "render.cy=24",
            "network.topology=miniature",
            "network.multiplier=8",
            "train.batch_size=2",
            "train.total_steps=3",
            "train.checkpoint_every=2",
            "data.scenes=1",
            "data.extent=12",
            "data.resolution=0.5",
            "data.boxes=2",
            "data.panels=1",
            "data.trajectory_length=1.2",
            "data.spacing=0.1",
        ]
    )


def _toy_view(camera: Intrinsics, pose: RigidTransform, viewpoint: str) -> TrainingView:
    hq_mesh = plane_mesh(np.array([0.0, 0.0, 3.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 0.8, 2)
    lq_mesh = plane_mesh(np.array([0.05, 0.0, 3.2]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 0.9, 2)
    hq = rasterize(hq_mesh, camera, pose)
    lq = rasterize(lq_mesh, camera, pose)
    g, valid = render_label(hq, lq)
    return TrainingView(lq, hq.triangle_id, g, valid, edge_weight_map(g, valid), viewpoint)


@pytest.fixture
def toy_groups(small_camera: Intrinsics) -> list[ViewGroup]:
    """Two view groups of a square patch seen from two nearby poses."""
    groups = []
    for i, offset in enumerate((0.0, 0.1)):
        views = [
            _toy_view(small_camera, RigidTransform.from_translation(offset, 0.0, 0.0), "front_left"),
            _toy_view(small_camera, RigidTransform.from_translation(offset - 0.06, 0.02, 0.0), "front_right"),
        ]
        groups.append(ViewGroup(f"toy_{i}", views))
    return groups
