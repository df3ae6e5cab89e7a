from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody, make_toy_body
from animatable_nerf.config import Config
from animatable_nerf.radiance_field import FieldArch
from animatable_nerf.renderer import Camera, RenderConfig, look_at
from animatable_nerf.synth_data import build_scene, render_dataset
from animatable_nerf.types import CameraSpec, SceneSpec, ToyBodySpec, TrajectorySpec


def _chain_weights(x: np.ndarray) -> np.ndarray:
    """Hat-function weights along the x axis for joints at x = 0, 1, 2."""
    w = np.maximum(0.0, 1.0 - np.abs(x[:, None] - np.arange(3)[None, :]))
    return w / w.sum(axis=1, keepdims=True)


@pytest.fixture
def chain_body():
    """Three joints on the x axis with a strip of vertices around them."""
    rng = np.random.default_rng(0)
    xs = np.linspace(-0.2, 2.4, 12)
    rest = np.stack([xs, rng.normal(scale=0.1, size=12), rng.normal(scale=0.1, size=12)], axis=1)
    return SkinnedBody(
        rest_vertices=rest,
        parents=np.array([-1, 0, 1]),
        joint_rest_positions=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
        blend_weights=_chain_weights(np.clip(xs, 0.0, 2.0)),
        shape_basis=rng.normal(scale=0.01, size=(2, 12, 3)),
        pose_basis=np.zeros((0, 12, 3)),
        faces=np.array([[i, i + 1, i + 2] for i in range(10)]),
        joint_names=("root", "middle", "tip"),
    )


@pytest.fixture
def small_body():
    """Random four-joint tree with shape and pose blendshapes."""
    rng = np.random.default_rng(1)
    v, k = 20, 4
    weights = rng.random((v, k))
    weights /= weights.sum(axis=1, keepdims=True)
    return SkinnedBody(
        rest_vertices=rng.normal(scale=0.5, size=(v, 3)),
        parents=np.array([-1, 0, 0, 1]),
        joint_rest_positions=rng.normal(scale=0.5, size=(k, 3)),
        blend_weights=weights,
        shape_basis=rng.normal(scale=0.02, size=(3, v, 3)),
        pose_basis=rng.normal(scale=0.02, size=(9 * (k - 1), v, 3)),
        faces=np.array([[0, 1, 2], [2, 3, 4]]),
    )


@pytest.fixture
def toy_spec():
    return ToyBodySpec(joint_count=6, rings_per_segment=3, ring_resolution=6, shape_count=2)


@pytest.fixture
def toy_body(toy_spec):
    return make_toy_body(toy_spec, seed=0)


@pytest.fixture
def random_pose():
    def make(body: SkinnedBody, seed: int = 0, scale: float = 0.4) -> PoseParams:
        rng = np.random.default_rng(seed)
        return PoseParams.create(
            rng.normal(scale=0.05, size=3), rng.normal(scale=scale, size=(body.joint_count, 3))
        )

    return make


@pytest.fixture
def zero_shape():
    def make(body: SkinnedBody) -> ShapeParams:
        return ShapeParams.zeros(body.shape_count)

    return make


@pytest.fixture
def tiny_arch():
    return FieldArch(encoding_bands=2, hidden_width=8, hidden_depth=2, skip_layer=1)


@pytest.fixture
def small_camera():
    return Camera(
        fx=20.0,
        fy=20.0,
        cx=8.0,
        cy=8.0,
        width=16,
        height=16,
        near=1.0,
        far=4.0,
        cam_to_world=look_at(np.array([0.0, 0.0, 2.5]), np.zeros(3)),
    )


def _tiny_scene_spec() -> SceneSpec:
    return SceneSpec(
        body=ToyBodySpec(joint_count=6, rings_per_segment=3, ring_resolution=6, shape_count=2),
        camera=CameraSpec(width=16, height=16, focal=22.0),
        trajectory=TrajectorySpec(turns=3.0, train_turns=2.0),
        frame_count=3,
    )


@pytest.fixture
def scene_spec():
    """Three 16x16 frames of a six-joint body; two train, one test."""
    return _tiny_scene_spec()


@pytest.fixture(scope="session")
def dataset_render():
    return RenderConfig(coarse_samples=8, importance_samples=4)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, dataset_render):
    out = tmp_path_factory.mktemp("dataset")
    render_dataset(
        build_scene(_tiny_scene_spec()),
        out,
        dataset_render,
        novel_pose_count=2,
        mesh_resolution=16,
    )
    return out


@pytest.fixture
def config(tiny_arch):
    """Fast settings: tiny field, few samples, short runs."""
    base = Config()
    return replace(
        base,
        field=tiny_arch,
        render=RenderConfig(coarse_samples=16, importance_samples=8, chunk_rays=256),
        train=replace(base.train, batch_rays=64, iterations=5, refine_iterations=3, log_every=1000),
    )
