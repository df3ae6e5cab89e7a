from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody, load_body
from animatable_nerf.checkpoint import pose_from_record
from animatable_nerf.imaging import read_mask, read_rgb
from animatable_nerf.synth_data import MANIFEST_FILE, camera_from_record
from animatable_nerf.trainer import Frame
from animatable_nerf.types import DatasetManifest, PoseSequence

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "all")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    root: Path
    manifest: DatasetManifest
    body: SkinnedBody
    frames: list[Frame]
    splits: list[str]

    @property
    def background(self) -> np.ndarray:
        return np.array(self.manifest.background, dtype=np.float64)

    def split(self, name: str) -> list[Frame]:
        if name not in SPLITS:
            raise ValueError(f"split must be one of {', '.join(SPLITS)}, got {name!r}")
        if name == "all":
            return list(self.frames)
        return [f for f, s in zip(self.frames, self.splits) if s == name]


def read_manifest(directory: str | Path) -> DatasetManifest:
    path = Path(directory) / MANIFEST_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    try:
        return DatasetManifest.model_validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, ValidationError) as e:
        raise DatasetError(f"{path}: invalid manifest: {e}") from None


def load_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    manifest = read_manifest(root)
    body = load_body(root / manifest.body_path)
    if not manifest.frames:
        raise DatasetError(f"{root}: manifest lists no frames")

    frames, splits = [], []
    seen: set[int] = set()
    for record in manifest.frames:
        if record.frame_id in seen:
            raise DatasetError(f"{root}: duplicate frame id {record.frame_id}")
        seen.add(record.frame_id)
        for rel in (record.image, record.mask):
            if not (root / rel).is_file():
                raise DatasetError(f"{root}: frame {record.frame_id} references missing file {rel}")
        shape = record.shape or [0.0] * body.shape_count
        try:
            frame = Frame(
                frame_id=record.frame_id,
                image=read_rgb(root / record.image),
                mask=read_mask(root / record.mask),
                camera=camera_from_record(record.camera),
                pose_init=pose_from_record(record.pose_init),
                shape_init=ShapeParams(np.array(shape)),
                pose_gt=pose_from_record(record.pose_gt),
            )
        except ValueError as e:
            raise DatasetError(f"{root}: frame {record.frame_id}: {e}") from None
        if frame.pose_init.joint_count != body.joint_count:
            raise DatasetError(
                f"{root}: frame {record.frame_id} pose has {frame.pose_init.joint_count} joints, body has {body.joint_count}"
            )
        if frame.shape_init.coefficients.shape[0] != body.shape_count:
            raise DatasetError(
                f"{root}: frame {record.frame_id} shape has {frame.shape_init.coefficients.shape[0]} "
                f"coefficients, body has {body.shape_count}"
            )
        frames.append(frame)
        splits.append(record.split)

    logger.debug("Loaded dataset %s: %d frames", root, len(frames))
    return Dataset(root=root, manifest=manifest, body=body, frames=frames, splits=splits)


def load_pose_sequence(path: str | Path, joint_count: int) -> tuple[list[PoseParams], PoseSequence]:
    """Poses from a pose-sequence file or, when given a dataset manifest, its GT poses."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no pose file at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid pose file: {e}") from None
    try:
        if "frames" in raw:
            manifest = DatasetManifest.model_validate(raw)
            sequence = PoseSequence(
                poses=[f.pose_gt for f in manifest.frames],
                camera=manifest.frames[0].camera if manifest.frames else None,
            )
        else:
            sequence = PoseSequence.model_validate(raw)
        poses = [pose_from_record(p) for p in sequence.poses]
    except (ValidationError, ValueError) as e:
        raise DatasetError(f"{path}: invalid pose file: {e}") from None
    if not poses:
        raise DatasetError(f"{path}: pose file lists no poses")
    for i, pose in enumerate(poses):
        if pose.joint_count != joint_count:
            raise DatasetError(f"{path}: pose {i} has {pose.joint_count} joints, body has {joint_count}")
    return poses, sequence
