from __future__ import annotations

import argparse
import logging
import math
from pathlib import Path

from animatable_nerf.body_model import PoseParams, vertex_transforms
from animatable_nerf.checkpoint import Checkpoint, load_checkpoint
from animatable_nerf.cli import cli, option
from animatable_nerf.config import Config
from animatable_nerf.dataset import load_dataset
from animatable_nerf.inference import render_and_write
from animatable_nerf.renderer import Camera, orbit_camera
from animatable_nerf.synth_data import write_pose_sequence
from animatable_nerf.trainer import Frame, refine_test_poses

logger = logging.getLogger(__name__)

REFINED_POSES_FILE = "refined_poses.json"


def _frame_pose(checkpoint: Checkpoint, frame: Frame) -> PoseParams:
    pose = checkpoint.pose_for(frame.frame_id)
    return pose if pose is not None else frame.pose_current


def render_views(
    checkpoint: Checkpoint,
    frames: list[Frame],
    out: str | Path,
    config: Config,
    *,
    refine: bool = False,
) -> dict[int, PoseParams]:
    """Render each frame's view at its trained (or refined held-out) pose."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    poses = {f.frame_id: _frame_pose(checkpoint, f) for f in frames}

    if refine:
        held_out = [f for f in frames if checkpoint.pose_for(f.frame_id) is None]
        if held_out:
            table = refine_test_poses(checkpoint, held_out, config)
            for f, row in zip(held_out, table):
                poses[f.frame_id] = PoseParams.from_vector(row, checkpoint.body.joint_count)
            write_pose_sequence(out / REFINED_POSES_FILE, [poses[f.frame_id] for f in held_out])

    per_frame = checkpoint.deformation_config.shape_mode == "per_frame"
    for f in frames:
        render_and_write(
            checkpoint,
            poses[f.frame_id],
            f.camera,
            config,
            out,
            f.frame_id,
            latent=checkpoint.latent_for(f.frame_id),
            shape=f.shape_init if per_frame else None,
        )
    logger.info("Rendered %d views into %s", len(frames), out)
    return poses


def render_orbit(checkpoint: Checkpoint, frame: Frame, count: int, out: str | Path, config: Config) -> list[Camera]:
    """``count`` cameras on a circle around the subject, all at ``frame``'s pose. Returns the cameras used."""
    if count < 1:
        raise ValueError(f"orbit needs at least 1 view, got {count}")
    pose = _frame_pose(checkpoint, frame)
    posed = vertex_transforms(checkpoint.body, checkpoint.shape, pose).posed_vertices
    target = 0.5 * (posed.min(axis=0) + posed.max(axis=0))
    cameras = [orbit_camera(frame.camera, 2.0 * math.pi * k / count, target) for k in range(count)]
    for k, camera in enumerate(cameras):
        render_and_write(checkpoint, pose, camera, config, out, k, latent=checkpoint.latent_for(frame.frame_id))
    logger.info("Rendered %d orbit views into %s", count, out)
    return cameras


# --- CLI command ---


@cli.command(
    name="render-view",
    description="Render dataset views (held-out by default) through a trained checkpoint.",
    options=[
        option("--checkpoint", required=True, help="checkpoint directory"),
        option("--data", required=True, help="dataset directory providing cameras and poses"),
        option("--out", required=True, help="output directory for images and maps"),
        option("--split", default="test", choices=("train", "test", "all"), help="frames to render"),
        option("--frames", type=int, nargs="+", help="restrict to these frame ids"),
        option("--refine", action="store_true", help="refine held-out poses with the frozen field first"),
        option("--orbit", type=int, help="instead render N views around the first selected frame"),
    ],
)
def command_render_view(args: argparse.Namespace, config: Config) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if dataset.body.joint_count != checkpoint.body.joint_count:
        raise ValueError(
            f"dataset body has {dataset.body.joint_count} joints, checkpoint body has {checkpoint.body.joint_count}"
        )
    frames = dataset.split(args.split)
    if args.frames:
        wanted = set(args.frames)
        frames = [f for f in frames if f.frame_id in wanted]
    if not frames:
        raise ValueError("no frames selected")
    if args.orbit is not None:
        render_orbit(checkpoint, frames[0], args.orbit, args.out, config)
        return
    render_views(checkpoint, frames, args.out, config, refine=args.refine)
