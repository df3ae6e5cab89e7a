from __future__ import annotations

import json
import math

import imageio.v3 as iio
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from animatable_nerf.body_model import PoseParams
from animatable_nerf.checkpoint import pose_from_record
from animatable_nerf.deformation import CANONICAL_PRESETS
from animatable_nerf.imaging import quantize_rgb, read_mask
from animatable_nerf.synth_data import (
    BODY_FILE,
    MANIFEST_FILE,
    MASK_DENSITY,
    NOVEL_POSES_FILE,
    articulated_trajectory,
    base_camera,
    build_scene,
    camera_from_record,
    camera_record,
    gt_mesh_file,
    perturb_poses,
    turntable_poses,
    with_initial_poses,
    write_pose_sequence,
)
from animatable_nerf.types import DatasetManifest, DensitySpec, PoseSequence, SceneSpec, TrajectorySpec


class TestTrajectoriesUnit:
    def test_turntable_root_angle(self, toy_body):
        poses = turntable_poses(toy_body, 8)
        for k, pose in enumerate(poses):
            expected = Rotation.from_rotvec([0.0, 2.0 * math.pi * k / 8, 0.0]).as_matrix()
            actual = Rotation.from_rotvec(pose.joint_rotations[0]).as_matrix()
            np.testing.assert_allclose(actual, expected, atol=1e-12)
            np.testing.assert_array_equal(pose.joint_rotations[1:], 0.0)

    def test_turntable_phase(self, toy_body):
        pose = turntable_poses(toy_body, 4, phase_deg=18.0)[0]
        np.testing.assert_allclose(pose.joint_rotations[0], [0.0, math.radians(18.0), 0.0])

    def test_articulation_bends_one_way(self, toy_body):
        poses = articulated_trajectory(toy_body, 12, 30.0, seed=0)
        elbow = toy_body.joint_index("l_elbow")
        knee = toy_body.joint_index("l_knee")
        if elbow is not None:
            assert all(p.joint_rotations[elbow, 1] >= 0.0 for p in poses)
        if knee is not None:
            assert all(p.joint_rotations[knee, 0] <= 0.0 for p in poses)
        assert len(poses) == 12
        assert max(np.abs(p.joint_rotations).max() for p in poses) <= math.radians(30.0) + 1e-12

    def test_articulation_needs_frames(self, toy_body):
        with pytest.raises(ValueError, match="at least 1 frame"):
            articulated_trajectory(toy_body, 0)


class TestPerturbPosesUnit:
    def test_noise_statistics(self):
        poses = [PoseParams.zeros(10)] * 400
        noisy = perturb_poses(poses, 5.0, seed=3)
        rotations = np.stack([p.joint_rotations for p in noisy])
        translations = np.stack([p.root_translation for p in noisy])
        assert rotations.std() == pytest.approx(math.radians(5.0), rel=0.05)
        assert abs(rotations.mean()) < 0.01
        lateral = translations[:, :2].std()
        assert lateral == pytest.approx(5.0 * 0.004, rel=0.15)
        assert translations[:, 2].std() / lateral == pytest.approx(2.0, rel=0.2)

    def test_zero_noise_is_identity(self, toy_body, random_pose):
        poses = [random_pose(toy_body, seed=s) for s in range(3)]
        assert perturb_poses(poses, 0.0) == poses

    def test_seeded(self):
        poses = [PoseParams.zeros(4)] * 3
        assert perturb_poses(poses, 2.0, seed=1) == perturb_poses(poses, 2.0, seed=1)

    def test_negative_noise(self):
        with pytest.raises(ValueError, match="noise_deg"):
            perturb_poses([PoseParams.zeros(2)], -1.0)


class TestSceneUnit:
    def test_default_camera(self):
        camera = base_camera(SceneSpec())
        assert (camera.width, camera.height, camera.fx) == (64, 64, 90.0)
        np.testing.assert_allclose(camera.origin, [0.0, 0.0, 2.6])

    def test_splits_follow_turns(self, scene_spec):
        scene = build_scene(scene_spec)
        assert [p.split for p in scene.frames] == ["train", "train", "test"]
        test = scene.frames[2].pose.joint_rotations[0]
        expected = Rotation.from_rotvec([0.0, 2.0 * math.pi * 3.0 * 2 / 3 + math.radians(18.0), 0.0])
        np.testing.assert_allclose(Rotation.from_rotvec(test).as_matrix(), expected.as_matrix(), atol=1e-12)

    def test_field_density(self, scene_spec):
        field = build_scene(scene_spec).field
        far = field.evaluate(np.array([[0.0, 10.0, 0.0], [5.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(far.density, 0.0)
        inside = field.vertices[:5] - 0.01 * field.normals[:5]
        np.testing.assert_array_equal(field.evaluate(inside).density, 50.0)
        assert np.all((far.color >= 0.0) & (far.color <= 1.0))

    def test_empty_query(self, scene_spec):
        out = build_scene(scene_spec).field.evaluate(np.zeros((0, 3)))
        assert out.density.shape == (0,)

    @pytest.mark.parametrize(
        ("update", "message"),
        [
            ({"frame_count": 0}, "frame_count"),
            ({"density": DensitySpec(shell_thickness=0.0)}, "shell_thickness"),
            ({"trajectory": TrajectorySpec(hold_pose="Q")}, "hold_pose"),
            ({"trajectory": TrajectorySpec(turns=1.0, train_turns=2.0)}, "train_turns"),
        ],
    )
    def test_invalid_spec(self, scene_spec, update, message):
        with pytest.raises(ValueError, match=message):
            build_scene(scene_spec.model_copy(update=update))


class TestDatasetFilesUnit:
    def test_layout(self, dataset_dir):
        assert (dataset_dir / BODY_FILE).is_file()
        assert (dataset_dir / NOVEL_POSES_FILE).is_file()
        for preset in CANONICAL_PRESETS:
            assert (dataset_dir / gt_mesh_file(preset)).is_file()
        manifest = DatasetManifest.model_validate(json.loads((dataset_dir / MANIFEST_FILE).read_text()))
        assert [f.frame_id for f in manifest.frames] == [0, 1, 2]
        assert all((dataset_dir / f.image).is_file() and (dataset_dir / f.mask).is_file() for f in manifest.frames)
        assert manifest.scene.frame_count == 3

    def test_manifest_uses_camel_case(self, dataset_dir):
        raw = json.loads((dataset_dir / MANIFEST_FILE).read_text())
        assert "bodyPath" in raw
        assert {"frameID", "poseGT", "poseInit"} <= set(raw["frames"][0])

    def test_with_initial_poses(self, dataset_dir):
        manifest = DatasetManifest.model_validate(json.loads((dataset_dir / MANIFEST_FILE).read_text()))
        poses = [PoseParams.zeros(6)] * 3
        updated = with_initial_poses(manifest, poses)
        assert updated.frames[1].pose_init.root_translation == [0.0, 0.0, 0.0]
        assert updated.frames[1].pose_gt == manifest.frames[1].pose_gt
        with pytest.raises(ValueError, match="got 1 poses for 3 frames"):
            with_initial_poses(manifest, poses[:1])

    def test_frame_re_renders_from_manifest(self, dataset_dir, scene_spec, dataset_render):
        manifest = DatasetManifest.model_validate(json.loads((dataset_dir / MANIFEST_FILE).read_text()))
        record = manifest.frames[0]
        scene = build_scene(scene_spec)
        pose, camera = pose_from_record(record.pose_gt), camera_from_record(record.camera)
        rendered, _ = scene.render(pose, dataset_render, camera=camera)

        stored = iio.imread(dataset_dir / record.image)[..., :3].astype(np.int16)
        assert np.abs(quantize_rgb(rendered.image).astype(np.int16) - stored).max() <= 1
        mask = read_mask(dataset_dir / record.mask)
        assert mask.any()
        assert np.all(rendered.density[mask == 1] > MASK_DENSITY)


class TestRecordsUnit:
    def test_camera_record(self):
        camera = base_camera(SceneSpec())
        again = camera_from_record(camera_record(camera))
        np.testing.assert_array_equal(again.cam_to_world, camera.cam_to_world)
        assert (again.fx, again.near, again.far) == (camera.fx, camera.near, camera.far)

    def test_pose_sequence_file(self, tmp_path, toy_body, random_pose):
        path = tmp_path / "seq.json"
        write_pose_sequence(path, [random_pose(toy_body, seed=1)], base_camera(SceneSpec()))
        sequence = PoseSequence.model_validate(json.loads(path.read_text()))
        assert len(sequence.poses) == 1
        assert sequence.camera.width == 64
