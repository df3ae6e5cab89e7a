from __future__ import annotations

import argparse
import logging
from pathlib import Path

from animatable_nerf.body_model import PoseParams
from animatable_nerf.checkpoint import Checkpoint, load_checkpoint
from animatable_nerf.cli import cli, option
from animatable_nerf.config import Config
from animatable_nerf.dataset import load_pose_sequence
from animatable_nerf.inference import render_and_write
from animatable_nerf.renderer import Camera
from animatable_nerf.synth_data import base_camera, camera_from_record
from animatable_nerf.types import SceneSpec

logger = logging.getLogger(__name__)


def animate(
    checkpoint: Checkpoint,
    poses: list[PoseParams],
    camera: Camera,
    out: str | Path,
    config: Config,
) -> int:
    """Render a novel pose sequence through the trained field; frame ids count from 0."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        render_and_write(checkpoint, pose, camera, config, out, i)
    logger.info("Animated %d poses into %s", len(poses), out)
    return len(poses)


# --- CLI command ---


@cli.command(
    name="animate",
    description="Render a pose sequence (pose file or dataset manifest) through a trained checkpoint.",
    options=[
        option("--checkpoint", required=True, help="checkpoint directory"),
        option("--poses", required=True, help="pose sequence JSON, or a dataset directory/manifest"),
        option("--out", required=True, help="output directory for images and maps"),
    ],
)
def command_animate(args: argparse.Namespace, config: Config) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    poses, sequence = load_pose_sequence(args.poses, checkpoint.body.joint_count)
    if sequence.camera is not None:
        camera = camera_from_record(sequence.camera)
    else:
        logger.info("Pose file has no camera; using the default scene camera")
        camera = base_camera(SceneSpec())
    animate(checkpoint, poses, camera, args.out, config)
