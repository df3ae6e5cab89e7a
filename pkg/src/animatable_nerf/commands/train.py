from __future__ import annotations

import argparse
import logging
from pathlib import Path

from animatable_nerf.body_model import PoseParams
from animatable_nerf.checkpoint import LOG_FILE, Checkpoint, save_checkpoint
from animatable_nerf.cli import cli, option
from animatable_nerf.config import Config
from animatable_nerf.dataset import load_dataset
from animatable_nerf.synth_data import write_pose_sequence
from animatable_nerf.trainer import train

logger = logging.getLogger(__name__)

POSES_FILE = "poses.json"


def train_dataset(data: str | Path, out: str | Path, config: Config, *, split: str = "train") -> Checkpoint:
    dataset = load_dataset(data)
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"dataset {data} has no {split!r} frames")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    checkpoint = train(
        frames,
        dataset.body,
        config,
        background=dataset.background,
        log_path=out / LOG_FILE,
        checkpoint_dir=out,
    )
    save_checkpoint(checkpoint, out)
    poses = [PoseParams.from_vector(row, dataset.body.joint_count) for row in checkpoint.poses]
    write_pose_sequence(out / POSES_FILE, poses, frames[0].camera)
    return checkpoint


# --- CLI command ---


@cli.command(
    name="train",
    description="Train coarse/fine fields and refine training poses on a dataset.",
    options=[
        option("--data", required=True, help="dataset directory"),
        option("--out", required=True, help="checkpoint output directory"),
        option("--split", default="train", choices=("train", "test", "all"), help="frames to train on"),
        option("--iterations", type=int, help="training iterations"),
        option("--canonical", choices=("A", "T", "X"), help="canonical pose preset"),
        option("--lambda-d", type=float, help="background regularization weight"),
        option("--refine-poses", action=argparse.BooleanOptionalAction, default=None, help="refine training poses"),
        option("--deformation", action=argparse.BooleanOptionalAction, default=None, help="warp to canonical space"),
        option("--latent-codes", action=argparse.BooleanOptionalAction, default=None, help="per-frame latent codes"),
        option("--view-direction", action=argparse.BooleanOptionalAction, default=None, help="view-dependent colour"),
        option("--background-reg", action=argparse.BooleanOptionalAction, default=None, help="background loss"),
        option("--jitter", action=argparse.BooleanOptionalAction, default=None, help="jittered stratified samples"),
    ],
    overrides={
        "iterations": "train.iterations",
        "canonical": "deformation.canonical_preset",
        "lambda_d": "train.lambda_d",
        "refine_poses": "train.refine_poses",
        "deformation": "train.deformation",
        "latent_codes": "train.latent_codes",
        "view_direction": "train.view_direction",
        "background_reg": "train.background_reg",
        "jitter": "train.jitter",
    },
)
def command_train(args: argparse.Namespace, config: Config) -> None:
    checkpoint = train_dataset(args.data, args.out, config, split=args.split)
    logger.info("Training finished at iteration %d: %s", checkpoint.iteration, args.out)
