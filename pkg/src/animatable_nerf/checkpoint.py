"""Trained-model checkpoints.

A checkpoint is a directory::

    checkpoint.bin   magic line, one JSON header line, then little-endian float32
                     blobs: coarse params, fine params, latent codes (frames x dim)
    body.anb         the skinned body the model was trained with
    train_log.csv    per-iteration losses (written by the trainer, optional)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody, load_body, save_body
from animatable_nerf.deformation import DeformationConfig
from animatable_nerf.radiance_field import FieldArch, FieldParams
from animatable_nerf.types import CheckpointHeader, DeformationRecord, PoseRecord

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ANERF-CKPT"
CHECKPOINT_VERSION = 1
CHECKPOINT_FILE = "checkpoint.bin"
BODY_FILE = "body.anb"
LOG_FILE = "train_log.csv"

_BLOB_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    coarse: FieldParams
    fine: FieldParams
    body: SkinnedBody
    canonical_pose: PoseParams
    shape: ShapeParams
    poses: np.ndarray
    frame_ids: list[int]
    latents: np.ndarray
    iteration: int
    deformation: bool
    deformation_config: DeformationConfig
    background: np.ndarray

    def pose_for(self, frame_id: int) -> PoseParams | None:
        if frame_id not in self.frame_ids:
            return None
        row = self.poses[self.frame_ids.index(frame_id)]
        return PoseParams.from_vector(row, self.body.joint_count)

    def latent_for(self, frame_id: int) -> np.ndarray | None:
        if not self.coarse.arch.latent_dim:
            return None
        if frame_id in self.frame_ids:
            return self.latents[self.frame_ids.index(frame_id)]
        return np.zeros(self.coarse.arch.latent_dim)


def pose_record(pose: PoseParams) -> PoseRecord:
    return PoseRecord(
        root_translation=pose.root_translation.tolist(),
        joint_rotations=pose.joint_rotations.tolist(),
    )


def pose_from_record(record: PoseRecord) -> PoseParams:
    return PoseParams.create(record.root_translation, record.joint_rotations)


def _deformation_record(config: DeformationConfig) -> DeformationRecord:
    return DeformationRecord(
        k_neighbors=config.k_neighbors,
        bandwidth=config.bandwidth,
        mask_threshold=config.mask_threshold,
        canonical_preset=config.canonical_preset,
        shape_mode=config.shape_mode,
    )


def save_checkpoint(checkpoint: Checkpoint, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arch = checkpoint.coarse.arch
    joint_count = checkpoint.body.joint_count
    header = CheckpointHeader(
        version=CHECKPOINT_VERSION,
        arch=arch.to_dict(),
        scene_center=list(checkpoint.coarse.center),
        scene_radius=checkpoint.coarse.radius,
        canonical_pose=pose_record(checkpoint.canonical_pose),
        shape=checkpoint.shape.coefficients.tolist(),
        iteration=checkpoint.iteration,
        field_size=arch.param_count,
        latent_codes=int(checkpoint.latents.shape[0]) if arch.latent_dim else 0,
        deformation=checkpoint.deformation,
        deformation_config=_deformation_record(checkpoint.deformation_config),
        background=[float(c) for c in checkpoint.background],
        poses=[pose_record(PoseParams.from_vector(row, joint_count)) for row in checkpoint.poses],
        frame_ids=list(checkpoint.frame_ids),
    )

    blobs = [
        np.asarray(checkpoint.coarse.values, dtype=_BLOB_DTYPE).tobytes(),
        np.asarray(checkpoint.fine.values, dtype=_BLOB_DTYPE).tobytes(),
    ]
    if arch.latent_dim:
        blobs.append(np.asarray(checkpoint.latents, dtype=_BLOB_DTYPE).tobytes())

    path = directory / CHECKPOINT_FILE
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(json.dumps(header.model_dump(by_alias=True)).encode() + b"\n")
        for blob in blobs:
            f.write(blob)
    save_body(checkpoint.body, directory / BODY_FILE)
    logger.info("Checkpoint written: %s (iteration %d)", directory, checkpoint.iteration)
    return path


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    path = directory / CHECKPOINT_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    data = path.read_bytes()

    magic, _, rest = data.partition(b"\n")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_line, sep, blob = rest.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: truncated header")
    try:
        raw = json.loads(header_line)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from None
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: incompatible checkpoint version {raw.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        header = CheckpointHeader.model_validate(raw)
        arch = FieldArch.from_dict(header.arch)
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: invalid header: {e}") from None
    if arch.param_count != header.field_size:
        raise CheckpointError(
            f"{path}: header field size {header.field_size} does not match arch ({arch.param_count})"
        )

    values = np.frombuffer(blob, dtype=_BLOB_DTYPE)
    frames = len(header.frame_ids)
    latent_size = header.latent_codes * arch.latent_dim
    expected = 2 * header.field_size + latent_size
    if values.size != expected or len(blob) % _BLOB_DTYPE.itemsize:
        raise CheckpointError(
            f"{path}: parameter blob has {len(blob)} bytes, expected {expected * _BLOB_DTYPE.itemsize}"
        )
    values = values.astype(np.float32)
    size = header.field_size
    center = tuple(header.scene_center)
    coarse = FieldParams(arch, values[:size].copy(), center=center, radius=header.scene_radius)
    fine = FieldParams(arch, values[size : 2 * size].copy(), center=center, radius=header.scene_radius)
    latents = values[2 * size :].astype(np.float64).reshape(header.latent_codes, arch.latent_dim)
    if not arch.latent_dim:
        latents = np.zeros((frames, 0))

    body = load_body(directory / BODY_FILE)
    record = header.deformation_config
    deformation = DeformationConfig(
        k_neighbors=record.k_neighbors,
        bandwidth=record.bandwidth,
        mask_threshold=record.mask_threshold,
        canonical_preset=record.canonical_preset,
        shape_mode=record.shape_mode,
    )
    poses = [pose_from_record(p) for p in header.poses]
    return Checkpoint(
        coarse=coarse,
        fine=fine,
        body=body,
        canonical_pose=pose_from_record(header.canonical_pose),
        shape=ShapeParams(np.array(header.shape)),
        poses=np.stack([p.as_vector() for p in poses]) if poses else np.zeros((0, body.pose_param_count)),
        frame_ids=list(header.frame_ids),
        latents=latents,
        iteration=header.iteration,
        deformation=header.deformation,
        deformation_config=deformation,
        background=np.array(header.background),
    )
