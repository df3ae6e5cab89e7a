from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from animatable_nerf.checkpoint import Checkpoint, load_checkpoint
from animatable_nerf.cli import cli, option
from animatable_nerf.config import Config
from animatable_nerf.geometry import Mesh, extract_mesh, grid_around, save_obj
from animatable_nerf.inference import pose_warp
from animatable_nerf.radiance_field import NeuralField
from animatable_nerf.types import MeshInfo

logger = logging.getLogger(__name__)

MESH_FILE = "mesh.obj"
MESH_INFO_FILE = "mesh.json"


def extract_canonical_mesh(checkpoint: Checkpoint, config: Config) -> tuple[Mesh, MeshInfo]:
    """Marching cubes over the fine field, gated by the 3D mask at the canonical pose.

    Without deformation the field lives in observation space; the first
    training pose stands in for the canonical one.
    """
    mc = config.mesh
    if checkpoint.deformation:
        pose = checkpoint.canonical_pose
    else:
        pose = checkpoint.pose_for(checkpoint.frame_ids[0]) if checkpoint.frame_ids else checkpoint.canonical_pose
    warp = pose_warp(checkpoint, pose)
    grid = grid_around(
        warp.posed_vertices, mc.resolution, mc.padding + checkpoint.deformation_config.mask_threshold, mc.iso_level
    )
    latent = np.zeros(checkpoint.fine.arch.latent_dim) if checkpoint.fine.arch.latent_dim else None
    mesh = extract_mesh(NeuralField(checkpoint.fine, latent), grid, warp)
    info = MeshInfo(
        iso_level=mc.iso_level,
        resolution=mc.resolution,
        bounds_min=list(grid.bounds_min),
        bounds_max=list(grid.bounds_max),
        vertex_count=int(mesh.vertices.shape[0]),
        face_count=int(mesh.faces.shape[0]),
        canonical_preset=checkpoint.deformation_config.canonical_preset,
    )
    return mesh, info


def write_mesh(mesh: Mesh, info: MeshInfo, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(mesh, out / MESH_FILE)
    (out / MESH_INFO_FILE).write_text(json.dumps(info.model_dump(by_alias=True), indent=2))
    return out / MESH_FILE


# --- CLI command ---


@cli.command(
    name="extract-mesh",
    description="Extract the canonical iso-surface of a trained checkpoint as OBJ.",
    options=[
        option("--checkpoint", required=True, help="checkpoint directory"),
        option("--out", required=True, help="output directory (mesh.obj + mesh.json)"),
        option("--resolution", type=int, help="grid resolution per axis"),
        option("--iso-level", type=float, help="density iso-level"),
    ],
    overrides={"resolution": "mesh.resolution", "iso_level": "mesh.iso_level"},
)
def command_extract_mesh(args: argparse.Namespace, config: Config) -> None:
    checkpoint = load_checkpoint(args.checkpoint)
    mesh, info = extract_canonical_mesh(checkpoint, config)
    path = write_mesh(mesh, info, args.out)
    if mesh.is_empty:
        logger.warning("No surface at iso level %.3g; wrote an empty mesh to %s", info.iso_level, path)
