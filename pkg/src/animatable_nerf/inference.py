from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from animatable_nerf.body_model import PoseParams, ShapeParams, vertex_transforms
from animatable_nerf.checkpoint import Checkpoint
from animatable_nerf.config import Config
from animatable_nerf.deformation import PoseWarp
from animatable_nerf.imaging import write_render
from animatable_nerf.radiance_field import NeuralField
from animatable_nerf.renderer import Camera, RenderedImage, camera_for_body, render_image
from animatable_nerf.types import RenderSidecar

logger = logging.getLogger(__name__)


def pose_warp(checkpoint: Checkpoint, pose: PoseParams, shape: ShapeParams | None = None) -> PoseWarp:
    shape = shape if shape is not None else checkpoint.shape
    return PoseWarp(checkpoint.body, pose, shape, checkpoint.deformation_config, checkpoint.canonical_pose)


def render_pose(
    checkpoint: Checkpoint,
    pose: PoseParams,
    camera: Camera,
    config: Config,
    *,
    latent: np.ndarray | None = None,
    shape: ShapeParams | None = None,
) -> tuple[RenderedImage, Camera]:
    """Render the fine image of the body at ``pose``, near/far fitted to the posed body."""
    shape = shape if shape is not None else checkpoint.shape
    margin = checkpoint.deformation_config.mask_threshold
    if checkpoint.deformation:
        warp = pose_warp(checkpoint, pose, shape)
        posed = warp.posed_vertices
    else:
        warp = None
        posed = vertex_transforms(checkpoint.body, shape, pose).posed_vertices
    camera = camera_for_body(camera, posed, margin, config.render.near_far_margin)
    if latent is None and checkpoint.coarse.arch.latent_dim:
        latent = np.zeros(checkpoint.coarse.arch.latent_dim)
    image = render_image(
        NeuralField(checkpoint.coarse, latent),
        NeuralField(checkpoint.fine, latent),
        camera,
        warp,
        config.render,
        background=checkpoint.background,
        workers=config.threads,
    )
    return image, camera


def render_and_write(
    checkpoint: Checkpoint,
    pose: PoseParams,
    camera: Camera,
    config: Config,
    out_dir: str | Path,
    frame_id: int,
    *,
    latent: np.ndarray | None = None,
    shape: ShapeParams | None = None,
) -> tuple[RenderedImage, RenderSidecar]:
    image, used = render_pose(checkpoint, pose, camera, config, latent=latent, shape=shape)
    sidecar = write_render(out_dir, frame_id, image.image, image.density, image.depth, near=used.near, far=used.far)
    logger.debug("Rendered frame %d", frame_id)
    return image, sidecar
