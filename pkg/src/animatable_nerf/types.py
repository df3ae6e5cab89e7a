from __future__ import annotations

from pydantic import BaseModel, Field

# --- Scene specification (echoed verbatim into dataset manifests) ---


class ToyBodySpec(BaseModel):
    joint_count: int = Field(default=10, alias="jointCount")
    rings_per_segment: int = Field(default=6, alias="ringsPerSegment")
    ring_resolution: int = Field(default=10, alias="ringResolution")
    scale: float = Field(default=1.0, alias="scale")
    torso_radius: float = Field(default=0.13, alias="torsoRadius")
    head_radius: float = Field(default=0.09, alias="headRadius")
    arm_radius: float = Field(default=0.05, alias="armRadius")
    leg_radius: float = Field(default=0.065, alias="legRadius")
    blend_zone: float = Field(default=0.2, alias="blendZone")
    shape_count: int = Field(default=4, alias="shapeCount")
    surface_noise: float = Field(default=0.0, alias="surfaceNoise")

    model_config = {"populate_by_name": True}


class TextureSpec(BaseModel):
    stripe_frequency: float = Field(default=3.0, alias="stripeFrequency")
    stripe_contrast: float = Field(default=0.25, alias="stripeContrast")

    model_config = {"populate_by_name": True}


class DensitySpec(BaseModel):
    shell_thickness: float = Field(default=0.03, alias="shellThickness")
    interior_density: float = Field(default=50.0, alias="interiorDensity")

    model_config = {"populate_by_name": True}


class TrajectorySpec(BaseModel):
    turns: float = Field(default=3.0, alias="turns")
    train_turns: float = Field(default=2.0, alias="trainTurns")
    test_phase_offset_deg: float = Field(default=18.0, alias="testPhaseOffsetDeg")
    hold_pose: str = Field(default="A", alias="holdPose")
    articulation_deg: float = Field(default=0.0, alias="articulationDeg")
    distance: float = Field(default=2.6, alias="distance")

    model_config = {"populate_by_name": True}


class CameraSpec(BaseModel):
    width: int = Field(default=64, alias="width")
    height: int = Field(default=64, alias="height")
    focal: float = Field(default=90.0, alias="focal")

    model_config = {"populate_by_name": True}


class SceneSpec(BaseModel):
    body: ToyBodySpec = Field(default_factory=ToyBodySpec, alias="body")
    texture: TextureSpec = Field(default_factory=TextureSpec, alias="texture")
    density: DensitySpec = Field(default_factory=DensitySpec, alias="density")
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec, alias="trajectory")
    camera: CameraSpec = Field(default_factory=CameraSpec, alias="camera")
    frame_count: int = Field(default=30, alias="frameCount")
    seed: int = Field(default=0, alias="seed")

    model_config = {"populate_by_name": True}


# --- Dataset manifest ---


class CameraRecord(BaseModel):
    fx: float = Field(alias="fx")
    fy: float = Field(alias="fy")
    cx: float = Field(alias="cx")
    cy: float = Field(alias="cy")
    width: int = Field(alias="width")
    height: int = Field(alias="height")
    near: float = Field(alias="near")
    far: float = Field(alias="far")
    cam_to_world: list[list[float]] = Field(
        default_factory=lambda: [[1.0 if i == j else 0.0 for j in range(4)] for i in range(4)],
        alias="camToWorld",
    )

    model_config = {"populate_by_name": True}


class PoseRecord(BaseModel):
    root_translation: list[float] = Field(alias="rootTranslation")
    joint_rotations: list[list[float]] = Field(alias="jointRotations")

    model_config = {"populate_by_name": True}


class FrameRecord(BaseModel):
    frame_id: int = Field(alias="frameID")
    image: str = Field(alias="image")
    mask: str = Field(alias="mask")
    split: str = Field(default="train", alias="split")
    camera: CameraRecord = Field(alias="camera")
    pose_gt: PoseRecord = Field(alias="poseGT")
    pose_init: PoseRecord = Field(alias="poseInit")
    shape: list[float] = Field(default_factory=list, alias="shape")

    model_config = {"populate_by_name": True}


class DatasetManifest(BaseModel):
    version: int = Field(default=1, alias="version")
    body_path: str = Field(alias="bodyPath")
    background: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0], alias="background")
    frames: list[FrameRecord] = Field(default_factory=list, alias="frames")
    scene: SceneSpec | None = Field(default=None, alias="scene")

    model_config = {"populate_by_name": True}


class PoseSequence(BaseModel):
    """Pose file for `animate`; same shape as the manifest's pose entries."""

    poses: list[PoseRecord] = Field(default_factory=list, alias="poses")
    camera: CameraRecord | None = Field(default=None, alias="camera")

    model_config = {"populate_by_name": True}


# --- Checkpoint and reports ---


class DeformationRecord(BaseModel):
    k_neighbors: int = Field(alias="kNeighbors")
    bandwidth: float = Field(alias="bandwidth")
    mask_threshold: float = Field(alias="maskThreshold")
    canonical_preset: str = Field(alias="canonicalPreset")
    shape_mode: str = Field(alias="shapeMode")

    model_config = {"populate_by_name": True}


class CheckpointHeader(BaseModel):
    version: int = Field(alias="version")
    arch: dict[str, int] = Field(alias="arch")
    scene_center: list[float] = Field(alias="sceneCenter")
    scene_radius: float = Field(alias="sceneRadius")
    canonical_pose: PoseRecord = Field(alias="canonicalPose")
    shape: list[float] = Field(alias="shape")
    iteration: int = Field(alias="iteration")
    field_size: int = Field(alias="fieldSize")
    latent_codes: int = Field(default=0, alias="latentCodes")
    deformation: bool = Field(default=True, alias="deformation")
    deformation_config: DeformationRecord = Field(alias="deformationConfig")
    background: list[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0], alias="background")
    poses: list[PoseRecord] = Field(default_factory=list, alias="poses")
    frame_ids: list[int] = Field(default_factory=list, alias="frameIDs")

    model_config = {"populate_by_name": True}


class TrainLogRow(BaseModel):
    iteration: int = Field(alias="iteration")
    loss_c: float = Field(alias="L_c")
    loss_p: float = Field(alias="L_p")
    loss_d: float = Field(alias="L_d")
    total: float = Field(alias="total")
    pose_error_deg: float | None = Field(default=None, alias="pose_error_deg")

    model_config = {"populate_by_name": True}


class MetricRow(BaseModel):
    frame_id: str = Field(alias="frame")
    psnr: float = Field(alias="psnr")
    ssim: float = Field(alias="ssim")
    lpips: float | None = Field(default=None, alias="lpips")

    model_config = {"populate_by_name": True}


class MeshMetricRow(BaseModel):
    name: str = Field(alias="mesh")
    p2s_cm: float = Field(alias="p2s_cm")
    chamfer_cm: float = Field(alias="chamfer_cm")
    iso_level: float = Field(alias="iso_level")

    model_config = {"populate_by_name": True}


class RenderSidecar(BaseModel):
    frame_id: int = Field(alias="frameID")
    density_scale: float = Field(alias="densityScale")
    depth_scale: float = Field(alias="depthScale")
    near: float = Field(alias="near")
    far: float = Field(alias="far")

    model_config = {"populate_by_name": True}


class MeshInfo(BaseModel):
    iso_level: float = Field(alias="isoLevel")
    resolution: int = Field(alias="resolution")
    bounds_min: list[float] = Field(alias="boundsMin")
    bounds_max: list[float] = Field(alias="boundsMax")
    vertex_count: int = Field(alias="vertexCount")
    face_count: int = Field(alias="faceCount")
    canonical_preset: str = Field(alias="canonicalPreset")

    model_config = {"populate_by_name": True}
