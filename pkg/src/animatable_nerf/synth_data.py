"""Synthetic ground-truth scenes and datasets.

A scene is the toy body plus an analytic canonical-space field: solid density
inside a thin shell around the canonical body surface and a procedural colour
pattern. Datasets are rendered through the project's own renderer.

Dataset layout::

    manifest.json        DatasetManifest (cameras, GT/initial poses, scene echo)
    body.anb             the skinned body
    frames/0000.png      8-bit RGB frames
    masks/0000.png       8-bit masks (255 = foreground)
    novel_poses.json     held-out articulated PoseSequence
    gt_mesh_{A,T,X}.obj  GT shell surface at each canonical preset
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody, make_toy_body, save_body, vertex_transforms
from animatable_nerf.checkpoint import pose_record
from animatable_nerf.deformation import (
    CANONICAL_PRESETS,
    DeformationConfig,
    NeighborWeights,
    PoseWarp,
    SpatialIndex,
    canonical_pose,
    neighbor_weights,
)
from animatable_nerf.geometry import Mesh, extract_mesh, grid_around, save_obj
from animatable_nerf.imaging import write_mask, write_rgb
from animatable_nerf.radiance_field import FieldOutput
from animatable_nerf.renderer import Camera, RenderConfig, RenderedImage, camera_for_body, look_at, render_image
from animatable_nerf.types import CameraRecord, DatasetManifest, FrameRecord, PoseSequence, SceneSpec

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BODY_FILE = "body.anb"
NOVEL_POSES_FILE = "novel_poses.json"
FRAMES_DIR = "frames"
MASKS_DIR = "masks"

# Lateral root-translation noise (metres) per degree of joint noise.
TRANSLATION_NOISE_PER_DEG = 0.004
DEPTH_NOISE_FACTOR = 2.0
MASK_DENSITY = 0.5
GT_CANONICAL_PRESET = "X"


def gt_mesh_file(preset: str) -> str:
    return f"gt_mesh_{preset}.obj"


class AnalyticField:
    """Ground-truth canonical field attached to the body posed at ``canonical``.

    Density is ``interior_density`` where the signed weighted distance to the
    canonical surface is at most ``shell_thickness``; the sign comes from the
    nearest vertex normal.
    """

    def __init__(
        self,
        body: SkinnedBody,
        canonical: PoseParams,
        shape: ShapeParams,
        spec: SceneSpec,
        config: DeformationConfig,
        seed: int = 0,
    ) -> None:
        self.body = body
        self.canonical = canonical
        self.config = config
        self.shell_thickness = spec.density.shell_thickness
        self.interior_density = spec.density.interior_density
        self.stripe_frequency = spec.texture.stripe_frequency
        self.stripe_contrast = spec.texture.stripe_contrast

        self.vertices = vertex_transforms(body, shape, canonical).posed_vertices
        self.normals = np.asarray(
            trimesh.Trimesh(vertices=self.vertices, faces=body.faces, process=False).vertex_normals
        )
        self.index = SpatialIndex(self.vertices)
        rng = np.random.default_rng(seed)
        self.palette = 0.2 + 0.6 * rng.random((body.joint_count, 3))
        self._owner = np.argmax(body.blend_weights, axis=1)

    def _signed(self, points: np.ndarray, nb: NeighborWeights) -> np.ndarray:
        distance = np.sum(nb.weights * nb.distances, axis=1)
        nearest = nb.indices[:, 0]
        outward = np.einsum("nc,nc->n", points - self.vertices[nearest], self.normals[nearest])
        return np.where(outward < 0.0, -distance, distance)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self._signed(points, neighbor_weights(points, self.index, self.body, self.config))

    def evaluate(self, points: np.ndarray, directions: np.ndarray | None = None) -> FieldOutput:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if points.shape[0] == 0:
            return FieldOutput(color=np.zeros((0, 3)), density=np.zeros(0))
        nb = neighbor_weights(points, self.index, self.body, self.config)
        density = np.where(self._signed(points, nb) <= self.shell_thickness, self.interior_density, 0.0)

        base = self.palette[self._owner[nb.indices[:, 0]]]
        phase = 2.0 * math.pi * self.stripe_frequency * (points[:, 1] + 0.5 * points[:, 0])
        stripes = 1.0 - self.stripe_contrast * 0.5 * (1.0 + np.sin(phase))
        color = np.clip(base * stripes[:, None], 0.0, 1.0)
        return FieldOutput(color=color, density=density)


@dataclass(frozen=True)
class FramePlan:
    frame_id: int
    split: str
    pose: PoseParams


@dataclass(eq=False)
class Scene:
    spec: SceneSpec
    seed: int
    body: SkinnedBody
    shape: ShapeParams
    field: AnalyticField
    camera: Camera
    frames: list[FramePlan]
    deformation: DeformationConfig
    background: np.ndarray

    @property
    def canonical(self) -> PoseParams:
        return self.field.canonical

    def render(self, pose: PoseParams, render: RenderConfig, *, camera: Camera | None = None, workers: int = 1) -> tuple[RenderedImage, Camera]:
        warp = PoseWarp(self.body, pose, self.shape, self.deformation, self.canonical)
        if camera is None:
            camera = camera_for_body(self.camera, warp.posed_vertices, self.deformation.mask_threshold, render.near_far_margin)
        image = render_image(self.field, None, camera, warp, render, background=self.background, workers=workers)
        return image, camera


def base_camera(spec: SceneSpec) -> Camera:
    cam = spec.camera
    distance = spec.trajectory.distance
    eye = np.array([0.0, 0.0, distance])
    return Camera(
        fx=cam.focal,
        fy=cam.focal,
        cx=cam.width / 2.0,
        cy=cam.height / 2.0,
        width=cam.width,
        height=cam.height,
        near=max(1e-2, distance - 1.5),
        far=distance + 1.5,
        cam_to_world=look_at(eye, np.zeros(3)),
    )


def hold_pose(body: SkinnedBody, preset: str) -> PoseParams:
    return canonical_pose(body, preset)


def turntable_poses(
    body: SkinnedBody,
    count: int,
    *,
    turns: float = 1.0,
    phase_deg: float = 0.0,
    base: PoseParams | None = None,
) -> list[PoseParams]:
    """Frame ``k`` turns the root by ``2*pi*turns*k/count`` (+ phase) about the up axis."""
    base = base if base is not None else PoseParams.zeros(body.joint_count)
    return [_turned(body, base, 2.0 * math.pi * turns * k / count + math.radians(phase_deg)) for k in range(count)]


def _turned(body: SkinnedBody, base: PoseParams, angle: float) -> PoseParams:
    rotations = base.joint_rotations.copy()
    rotations[int(np.flatnonzero(body.parents < 0)[0])] = (0.0, angle, 0.0)
    return PoseParams.create(base.root_translation, rotations)


_ARTICULATION = (
    # joint, axis, phase offset (cycles)
    ("l_shoulder", 2, 0.0),
    ("r_shoulder", 2, 0.5),
    ("l_elbow", 1, 0.25),
    ("r_elbow", 1, 0.75),
    ("l_hip", 0, 0.5),
    ("r_hip", 0, 0.0),
    ("l_knee", 0, 0.75),
    ("r_knee", 0, 0.25),
)


def articulated_trajectory(
    body: SkinnedBody,
    count: int,
    amplitude_deg: float = 30.0,
    seed: int = 0,
    *,
    base: PoseParams | None = None,
) -> list[PoseParams]:
    """Limb swings (arm raises, elbow/knee bends, leg swings) around ``base``."""
    if count < 1:
        raise ValueError(f"trajectory needs at least 1 frame, got {count}")
    base = base if base is not None else PoseParams.zeros(body.joint_count)
    rng = np.random.default_rng(seed)
    cycles = rng.uniform(0.75, 1.5, size=len(_ARTICULATION))
    amplitude = math.radians(amplitude_deg)
    poses = []
    for k in range(count):
        s = k / max(count - 1, 1)
        rotations = base.joint_rotations.copy()
        for (name, axis, offset), cycle in zip(_ARTICULATION, cycles):
            j = body.joint_index(name)
            if j is None:
                continue
            swing = amplitude * math.sin(2.0 * math.pi * (cycle * s + offset))
            if name.endswith(("elbow", "knee")):
                # Bends go one way only.
                swing = -abs(swing) if name.endswith("knee") else abs(swing)
            rotations[j, axis] += swing
        poses.append(PoseParams.create(base.root_translation, rotations))
    return poses


def build_scene(
    spec: SceneSpec | None = None,
    seed: int | None = None,
    *,
    deformation: DeformationConfig | None = None,
) -> Scene:
    spec = spec or SceneSpec()
    seed = spec.seed if seed is None else seed
    if spec.frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {spec.frame_count}")
    if not spec.density.shell_thickness > 0.0:
        raise ValueError(f"shell_thickness must be > 0, got {spec.density.shell_thickness}")
    if spec.trajectory.hold_pose not in CANONICAL_PRESETS:
        raise ValueError(f"hold_pose must be one of {', '.join(CANONICAL_PRESETS)}, got {spec.trajectory.hold_pose!r}")
    traj = spec.trajectory
    if not 0.0 < traj.train_turns <= traj.turns:
        raise ValueError(f"train_turns must be in (0, turns], got {traj.train_turns}")

    deformation = deformation or DeformationConfig()
    body = make_toy_body(spec.body, seed)
    shape = ShapeParams.zeros(body.shape_count)
    canonical = canonical_pose(body, GT_CANONICAL_PRESET)
    field = AnalyticField(body, canonical, shape, spec, deformation, seed)

    base = hold_pose(body, traj.hold_pose)
    if traj.articulation_deg > 0.0:
        bases = articulated_trajectory(body, spec.frame_count, traj.articulation_deg, seed, base=base)
    else:
        bases = [base] * spec.frame_count

    n = spec.frame_count
    train_count = int(round(n * traj.train_turns / traj.turns))
    plans = []
    for k in range(n):
        split = "train" if k < max(train_count, 1) else "test"
        phase = traj.test_phase_offset_deg if split == "test" else 0.0
        angle = 2.0 * math.pi * traj.turns * k / n + math.radians(phase)
        plans.append(FramePlan(k, split, _turned(body, bases[k], angle)))
    logger.debug("Scene: %d frames (%d train), %.1f deg per frame", n, train_count, 360.0 * traj.turns / n)

    return Scene(
        spec=spec,
        seed=seed,
        body=body,
        shape=shape,
        field=field,
        camera=base_camera(spec),
        frames=plans,
        deformation=deformation,
        background=np.ones(3),
    )


# --- Camera records ---


def camera_record(camera: Camera) -> CameraRecord:
    return CameraRecord(
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        width=camera.width,
        height=camera.height,
        near=camera.near,
        far=camera.far,
        cam_to_world=camera.cam_to_world.tolist(),
    )


def camera_from_record(record: CameraRecord) -> Camera:
    return Camera(
        fx=record.fx,
        fy=record.fy,
        cx=record.cx,
        cy=record.cy,
        width=record.width,
        height=record.height,
        near=record.near,
        far=record.far,
        cam_to_world=np.array(record.cam_to_world),
    )


def write_pose_sequence(path: str | Path, poses: list[PoseParams], camera: Camera | None = None) -> None:
    sequence = PoseSequence(
        poses=[pose_record(p) for p in poses],
        camera=camera_record(camera) if camera is not None else None,
    )
    Path(path).write_text(json.dumps(sequence.model_dump(by_alias=True, exclude_none=True), indent=2))


# --- Dataset generation ---


def gt_shell_mesh(scene: Scene, preset: str, *, resolution: int = 96, training_poses: list[PoseParams] | None = None) -> Mesh:
    """Iso-surface of the GT density with the body held at ``preset``."""
    canonical = canonical_pose(scene.body, preset, training_poses)
    field = AnalyticField(scene.body, canonical, scene.shape, scene.spec, scene.deformation, scene.seed)
    grid = grid_around(field.vertices, resolution, 2.0 * scene.spec.density.shell_thickness + 0.05, 0.5 * field.interior_density)
    return extract_mesh(field, grid)


def render_dataset(
    scene: Scene,
    out_dir: str | Path,
    render: RenderConfig | None = None,
    *,
    workers: int = 1,
    novel_pose_count: int = 10,
    novel_amplitude_deg: float = 30.0,
    mesh_resolution: int = 96,
) -> DatasetManifest:
    render = render or RenderConfig()
    out = Path(out_dir)
    (out / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    (out / MASKS_DIR).mkdir(parents=True, exist_ok=True)
    save_body(scene.body, out / BODY_FILE)

    records = []
    for plan in scene.frames:
        rendered, camera = scene.render(plan.pose, render, workers=workers)
        name = f"{plan.frame_id:04d}.png"
        mask = rendered.density > MASK_DENSITY
        write_rgb(out / FRAMES_DIR / name, rendered.image)
        write_mask(out / MASKS_DIR / name, mask)
        if not mask.any():
            logger.warning("Frame %d has an empty mask", plan.frame_id)
        pose = pose_record(plan.pose)
        records.append(
            FrameRecord(
                frame_id=plan.frame_id,
                image=f"{FRAMES_DIR}/{name}",
                mask=f"{MASKS_DIR}/{name}",
                split=plan.split,
                camera=camera_record(camera),
                pose_gt=pose,
                pose_init=pose,
                shape=scene.shape.coefficients.tolist(),
            )
        )

    manifest = DatasetManifest(
        body_path=BODY_FILE,
        background=[float(c) for c in scene.background],
        frames=records,
        scene=scene.spec,
    )
    write_manifest(manifest, out)

    hold = hold_pose(scene.body, scene.spec.trajectory.hold_pose)
    novel = articulated_trajectory(scene.body, novel_pose_count, novel_amplitude_deg, scene.seed + 1, base=hold)
    write_pose_sequence(out / NOVEL_POSES_FILE, novel)

    train_poses = [p.pose for p in scene.frames if p.split == "train"]
    for preset in CANONICAL_PRESETS:
        mesh = gt_shell_mesh(scene, preset, resolution=mesh_resolution, training_poses=train_poses)
        save_obj(mesh, out / gt_mesh_file(preset))

    logger.info("Dataset written: %s (%d frames)", out, len(records))
    return manifest


def write_manifest(manifest: DatasetManifest, directory: str | Path) -> Path:
    path = Path(directory) / MANIFEST_FILE
    path.write_text(json.dumps(manifest.model_dump(by_alias=True, exclude_none=True), indent=2))
    return path


def perturb_poses(poses: list[PoseParams], noise_deg: float, seed: int = 0) -> list[PoseParams]:
    """Gaussian joint noise of ``noise_deg`` std plus depth-biased root-translation noise."""
    if noise_deg < 0.0:
        raise ValueError(f"noise_deg must be >= 0, got {noise_deg}")
    if noise_deg == 0.0:
        return list(poses)
    rng = np.random.default_rng(seed)
    lateral = noise_deg * TRANSLATION_NOISE_PER_DEG
    scale = np.array([lateral, lateral, DEPTH_NOISE_FACTOR * lateral])
    out = []
    for pose in poses:
        rotations = pose.joint_rotations + rng.normal(scale=math.radians(noise_deg), size=pose.joint_rotations.shape)
        translation = pose.root_translation + rng.normal(size=3) * scale
        out.append(PoseParams.create(translation, rotations))
    return out


def with_initial_poses(manifest: DatasetManifest, poses: list[PoseParams]) -> DatasetManifest:
    if len(poses) != len(manifest.frames):
        raise ValueError(f"got {len(poses)} poses for {len(manifest.frames)} frames")
    frames = [f.model_copy(update={"pose_init": pose_record(p)}) for f, p in zip(manifest.frames, poses)]
    return manifest.model_copy(update={"frames": frames})
