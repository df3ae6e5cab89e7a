from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from animatable_nerf.dataset import DatasetError, load_dataset, load_pose_sequence, read_manifest
from animatable_nerf.synth_data import MANIFEST_FILE, NOVEL_POSES_FILE


@pytest.fixture
def dataset_copy(tmp_path, dataset_dir):
    return shutil.copytree(dataset_dir, tmp_path / "data")


class TestLoadDatasetUnit:
    def test_splits(self, dataset_dir):
        dataset = load_dataset(dataset_dir)
        assert [f.frame_id for f in dataset.split("train")] == [0, 1]
        assert [f.frame_id for f in dataset.split("test")] == [2]
        assert len(dataset.split("all")) == 3
        np.testing.assert_array_equal(dataset.background, [1.0, 1.0, 1.0])

    def test_frames_match_body(self, dataset_dir):
        dataset = load_dataset(dataset_dir)
        frame = dataset.frames[0]
        assert frame.image.shape == (16, 16, 3)
        assert frame.mask.shape == (16, 16)
        assert frame.pose_init.joint_count == dataset.body.joint_count == 6

    def test_unknown_split(self, dataset_dir):
        with pytest.raises(ValueError, match="split must be one of"):
            load_dataset(dataset_dir).split("val")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no dataset manifest"):
            read_manifest(tmp_path)

    def test_malformed_manifest(self, dataset_copy):
        (dataset_copy / MANIFEST_FILE).write_text("{not json")
        with pytest.raises(DatasetError, match="invalid manifest"):
            load_dataset(dataset_copy)

    def test_missing_frame_file(self, dataset_copy):
        (dataset_copy / "frames" / "0001.png").unlink()
        with pytest.raises(DatasetError, match="frame 1 references missing file"):
            load_dataset(dataset_copy)

    def test_duplicate_frame_ids(self, dataset_copy):
        raw = json.loads((dataset_copy / MANIFEST_FILE).read_text())
        raw["frames"][1]["frameID"] = 0
        (dataset_copy / MANIFEST_FILE).write_text(json.dumps(raw))
        with pytest.raises(DatasetError, match="duplicate frame id 0"):
            load_dataset(dataset_copy)


class TestPoseSequenceUnit:
    def test_novel_poses(self, dataset_dir):
        poses, sequence = load_pose_sequence(dataset_dir / NOVEL_POSES_FILE, 6)
        assert len(poses) == 2
        assert sequence.camera is None

    def test_manifest_gives_gt_poses(self, dataset_dir):
        poses, sequence = load_pose_sequence(dataset_dir, 6)
        assert len(poses) == 3
        assert sequence.camera.width == 16

    def test_joint_count_mismatch(self, dataset_dir):
        with pytest.raises(DatasetError, match="pose 0 has 6 joints, body has 4"):
            load_pose_sequence(dataset_dir / NOVEL_POSES_FILE, 4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no pose file"):
            load_pose_sequence(tmp_path / "poses.json", 6)
