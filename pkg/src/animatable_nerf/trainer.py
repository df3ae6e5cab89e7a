"""Joint optimisation of the coarse/fine fields and per-frame poses."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from animatable_nerf.body_model import (
    PoseParams,
    ShapeParams,
    SkinnedBody,
    rotation_angle_error,
    vertex_transforms,
)
from animatable_nerf.cache import WarpCache
from animatable_nerf.checkpoint import Checkpoint, save_checkpoint
from animatable_nerf.deformation import PoseWarp, canonical_pose
from animatable_nerf.radiance_field import FieldArch, FieldParams, NeuralField, init_field
from animatable_nerf.renderer import (
    Camera,
    RenderConfig,
    RenderGradients,
    RenderOutput,
    RenderTape,
    camera_for_body,
    generate_rays,
    hierarchical_depths,
    render_rays,
    render_rays_backward,
    sample_training_pixels,
    stratified_depths,
)
from animatable_nerf.types import TrainLogRow

if TYPE_CHECKING:
    from animatable_nerf.config import Config

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_d: float = 0.1
    lambda_1: float = 0.001
    lambda_2: float = 0.01
    batch_rays: int = 1024
    iterations: int = 20000
    lr_field: float = 5e-4
    lr_pose: float = 5e-5
    lr_latent: float = 5e-4
    refine_poses: bool = True
    deformation: bool = True
    latent_codes: bool = False
    latent_dim: int = 16
    view_direction: bool = False
    background_reg: bool = True
    jitter: bool = True
    log_every: int = 100
    checkpoint_every: int = 0
    refine_iterations: int = 300

    def __post_init__(self) -> None:
        for name in ("lambda_d", "lambda_1", "lambda_2"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lr_field", "lr_pose", "lr_latent"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.batch_rays < 1:
            raise ValueError(f"batch_rays must be >= 1, got {self.batch_rays}")
        if self.iterations < 0 or self.refine_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    @property
    def effective_lambda_d(self) -> float:
        return self.lambda_d if self.background_reg else 0.0


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    image: np.ndarray
    mask: np.ndarray
    camera: Camera
    pose_init: PoseParams
    shape_init: ShapeParams
    pose_current: PoseParams | None = None
    pose_gt: PoseParams | None = None

    def __post_init__(self) -> None:
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValueError(f"frame {self.frame_id}: image shape {self.image.shape} does not match camera {h}x{w}")
        if self.mask.shape != (h, w):
            raise ValueError(f"frame {self.frame_id}: mask shape {self.mask.shape} does not match camera {h}x{w}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError(f"frame {self.frame_id}: mask is not binary")
        if self.pose_current is None:
            object.__setattr__(self, "pose_current", self.pose_init)


# --- Losses ---


@dataclass(frozen=True)
class LossParts:
    reconstruction: float
    pose: float
    background: float


def loss_reconstruction(
    coarse: np.ndarray, fine: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    coarse, fine, target = (np.asarray(a, dtype=np.float64) for a in (coarse, fine, target))
    if not coarse.shape == fine.shape == target.shape:
        raise ValueError(
            f"batch shape mismatch: coarse {coarse.shape}, fine {fine.shape}, target {target.shape}"
        )
    batch = target.shape[0]
    rc, rf = coarse - target, fine - target
    value = float((np.sum(rc * rc) + np.sum(rf * rf)) / batch)
    return value, 2.0 * rc / batch, 2.0 * rf / batch


def loss_pose(
    poses_current: np.ndarray, poses_init: np.ndarray, lambda_1: float, lambda_2: float
) -> tuple[float, np.ndarray]:
    current = np.asarray(poses_current, dtype=np.float64)
    init = np.asarray(poses_init, dtype=np.float64)
    if current.shape != init.shape:
        raise ValueError(f"pose table shape mismatch: {current.shape} vs {init.shape}")
    grad = np.zeros_like(current)

    drift = current - init
    drift_norm = np.linalg.norm(drift, axis=1)
    value = lambda_1 * float(drift_norm.sum())
    nz = drift_norm > 0.0
    grad[nz] += lambda_1 * drift[nz] / drift_norm[nz, None]

    if current.shape[0] > 1:
        step = current[:-1] - current[1:]
        step_norm = np.linalg.norm(step, axis=1)
        value += lambda_2 * float(step_norm.sum())
        unit = np.zeros_like(step)
        nz = step_norm > 0.0
        unit[nz] = step[nz] / step_norm[nz, None]
        grad[:-1] += lambda_2 * unit
        grad[1:] -= lambda_2 * unit
    return value, grad


def loss_background(
    coarse_density: np.ndarray, fine_density: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    dc, df, target = (np.asarray(a, dtype=np.float64) for a in (coarse_density, fine_density, mask))
    if not dc.shape == df.shape == target.shape:
        raise ValueError(f"batch shape mismatch: {dc.shape}, {df.shape}, {target.shape}")
    batch = target.shape[0]
    rc, rf = dc - target, df - target
    value = float((np.abs(rc).sum() + np.abs(rf).sum()) / batch)
    return value, np.sign(rc) / batch, np.sign(rf) / batch


def total_loss(parts: LossParts, config: TrainConfig) -> float:
    return parts.reconstruction + parts.pose + config.effective_lambda_d * parts.background


# --- Adam ---


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class OptimizerState:
    groups: dict[str, AdamState] = field(default_factory=dict)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    *,
    group: str = "params",
) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.reshape(-1).shape:
        raise ValueError(
            f"parameter group {group!r}: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise ValueError(f"non-finite gradient in parameter group {group!r}")
    b1, b2 = ADAM_BETAS
    step = state.step + 1
    g = grads.reshape(-1)
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    update = (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).reshape(params.shape)
    new_params = (params.astype(np.float64) - update).astype(params.dtype)
    return new_params, AdamState(m, v, step)


def mean_shape(shapes: list[ShapeParams]) -> ShapeParams:
    if not shapes:
        raise ValueError("mean_shape needs at least one shape")
    dims = {s.coefficients.shape[0] for s in shapes}
    if len(dims) != 1:
        raise ValueError(f"shapes have differing dimensions: {sorted(dims)}")
    return ShapeParams(np.mean([s.coefficients for s in shapes], axis=0))


def pose_error_deg(poses: np.ndarray, gt: np.ndarray) -> float:
    """Mean geodesic joint-rotation error in degrees between two pose tables."""
    poses = np.asarray(poses).reshape(poses.shape[0], -1)
    gt = np.asarray(gt).reshape(gt.shape[0], -1)
    angles = rotation_angle_error(poses[:, 3:], gt[:, 3:])
    return float(np.degrees(angles.mean()))


# --- Training ---


def effective_arch(arch: FieldArch, config: TrainConfig) -> FieldArch:
    return replace(
        arch,
        latent_dim=config.latent_dim if config.latent_codes else 0,
        view_direction=config.view_direction,
    )


def frame_shapes(frames: list[Frame], mode: str) -> list[ShapeParams]:
    if mode == "per_frame":
        return [f.shape_init for f in frames]
    shared = mean_shape([f.shape_init for f in frames])
    return [shared] * len(frames)


def scene_bounds(points: np.ndarray, padding: float) -> tuple[tuple[float, float, float], float]:
    lo, hi = points.min(axis=0) - padding, points.max(axis=0) + padding
    center = 0.5 * (lo + hi)
    radius = float(0.5 * np.max(hi - lo))
    return (float(center[0]), float(center[1]), float(center[2])), radius


@dataclass
class _Batch:
    coarse: RenderOutput
    fine: RenderOutput
    coarse_tape: RenderTape | None
    fine_tape: RenderTape | None
    coarse_grads: RenderGradients | None = None
    fine_grads: RenderGradients | None = None


def _render_batch(
    coarse: NeuralField,
    fine: NeuralField,
    camera: Camera,
    pixels: np.ndarray,
    warp: PoseWarp | None,
    background: np.ndarray,
    render: RenderConfig,
    rng: np.random.Generator | None,
) -> _Batch:
    rays = generate_rays(camera, pixels)
    near = np.full(len(rays), camera.near)
    far = np.full(len(rays), camera.far)
    sentinel = camera.far - camera.near
    depths = stratified_depths(near, far, render.coarse_samples, rng)
    coarse_out, coarse_tape = render_rays(coarse, rays, depths, warp, background, sentinel, record=True)
    fine_depths = hierarchical_depths(depths, coarse_out.weights, near, far, render.importance_samples, rng)
    fine_out, fine_tape = render_rays(fine, rays, fine_depths, warp, background, sentinel, record=True)
    return _Batch(coarse_out, fine_out, coarse_tape, fine_tape)


class _LogWriter:
    def __init__(self, path: str | Path | None) -> None:
        self._file = None
        self._writer = None
        if path is not None:
            self._file = open(path, "w", newline="")
            columns = list(TrainLogRow.model_fields[name].alias for name in TrainLogRow.model_fields)
            self._writer = csv.DictWriter(self._file, fieldnames=columns)
            self._writer.writeheader()

    def write(self, row: TrainLogRow) -> None:
        if self._writer is not None:
            data = row.model_dump(by_alias=True)
            self._writer.writerow({k: ("" if v is None else repr(v)) for k, v in data.items()})

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


class _Session:
    """Shared state of one optimisation run over a sequence of frames."""

    def __init__(
        self,
        frames: list[Frame],
        body: SkinnedBody,
        config: Config,
        *,
        deformation: bool,
        canonical: PoseParams,
        shapes: list[ShapeParams],
        background: np.ndarray,
    ) -> None:
        self.frames = frames
        self.body = body
        self.config = config
        self.deformation = deformation
        self.background = np.asarray(background, dtype=np.float64)
        self.shapes = shapes
        self.canonical = canonical
        self.warp_config = replace(config.deformation, canonical_pose=canonical)
        self.cache = WarpCache(body, self.warp_config, canonical)
        self.init_table = np.stack([f.pose_init.as_vector() for f in frames])
        self.table = np.stack([f.pose_current.as_vector() for f in frames])
        gts = [f.pose_gt for f in frames]
        self.gt_table = np.stack([g.as_vector() for g in gts]) if all(g is not None for g in gts) else None

    def prepare(self, t: int) -> tuple[Camera, PoseWarp | None]:
        frame = self.frames[t]
        if not self.deformation:
            return frame.camera, None
        pose = PoseParams.from_vector(self.table[t], self.body.joint_count)
        warp = self.cache.get(t, pose, self.shapes[t])
        camera = camera_for_body(
            frame.camera,
            warp.posed_vertices,
            self.warp_config.mask_threshold,
            self.config.render.near_far_margin,
        )
        return camera, warp

    def step(
        self,
        t: int,
        coarse: NeuralField,
        fine: NeuralField,
        rng: np.random.Generator,
        iteration: int,
        *,
        want_pose: bool,
    ) -> tuple[LossParts, float, _Batch, np.ndarray, np.ndarray]:
        tc = self.config.train
        frame = self.frames[t]
        camera, warp = self.prepare(t)
        pixels = sample_training_pixels(frame.mask, tc.batch_rays, self.config.render.foreground_fraction, rng)
        batch = _render_batch(
            coarse, fine, camera, pixels, warp, self.background, self.config.render, rng if tc.jitter else None
        )
        target = frame.image[pixels[:, 0], pixels[:, 1]]
        mask_values = frame.mask[pixels[:, 0], pixels[:, 1]].astype(np.float64)

        lc, gc_coarse, gc_fine = loss_reconstruction(batch.coarse.pixel, batch.fine.pixel, target)
        ld, gd_coarse, gd_fine = loss_background(
            batch.coarse.integral_density, batch.fine.integral_density, mask_values
        )
        if want_pose:
            lp, gp = loss_pose(self.table, self.init_table, tc.lambda_1, tc.lambda_2)
        else:
            lp, gp = 0.0, np.zeros_like(self.table)
        parts = LossParts(lc, lp, ld)
        total = total_loss(parts, tc)
        if not math.isfinite(total):
            raise TrainingError(
                f"non-finite loss at iteration {iteration} (frame {frame.frame_id}): "
                f"L_c={lc} L_p={lp} L_d={ld}"
            )

        lam = tc.effective_lambda_d
        pose_grad = want_pose and warp is not None
        batch.coarse_grads = render_rays_backward(batch.coarse_tape, gc_coarse, lam * gd_coarse, want_pose=pose_grad)
        batch.fine_grads = render_rays_backward(batch.fine_tape, gc_fine, lam * gd_fine, want_pose=pose_grad)
        for grads in (batch.coarse_grads, batch.fine_grads):
            if grads.pose is not None:
                gp[t] += grads.pose
        return parts, total, batch, gp, pixels

    def pose_error(self) -> float | None:
        if self.gt_table is None:
            return None
        return pose_error_deg(self.table, self.gt_table)


def _field_grad(grads: RenderGradients, size: int) -> np.ndarray:
    if grads.field is None:
        return np.zeros(size)
    return grads.field.params


def _latent_grad(grads: RenderGradients, dim: int) -> np.ndarray:
    if grads.field is None or grads.field.latent is None:
        return np.zeros(dim)
    return grads.field.latent


def train(
    frames: list[Frame],
    body: SkinnedBody,
    config: Config,
    *,
    background: np.ndarray = (1.0, 1.0, 1.0),
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> Checkpoint:
    if not frames:
        raise ValueError("training needs at least one frame")
    for f in frames:
        if f.pose_init.joint_count != body.joint_count:
            raise ValueError(f"frame {f.frame_id}: pose has {f.pose_init.joint_count} joints, body has {body.joint_count}")

    tc = config.train
    dc = config.deformation
    seed = config.seed
    rng = np.random.default_rng(seed)

    shapes = frame_shapes(frames, dc.shape_mode)
    canonical = dc.canonical_pose
    if canonical is None:
        canonical = canonical_pose(body, dc.canonical_preset, [f.pose_init for f in frames])
    session = _Session(
        frames, body, config, deformation=tc.deformation, canonical=canonical, shapes=shapes, background=background
    )

    if tc.deformation:
        rest = vertex_transforms(body, shapes[0], canonical).posed_vertices
        center, radius = scene_bounds(rest, dc.mask_threshold)
    else:
        posed = np.concatenate(
            [vertex_transforms(body, s, f.pose_init).posed_vertices for f, s in zip(frames, shapes)]
        )
        center, radius = scene_bounds(posed, dc.mask_threshold)

    arch = effective_arch(config.field, tc)
    coarse = init_field(arch, seed, center=center, radius=radius, dtype=np.float32)
    fine = init_field(arch, seed + 1, center=center, radius=radius, dtype=np.float32)
    size = arch.param_count
    latents = np.zeros((len(frames), arch.latent_dim))
    refine = tc.refine_poses and tc.deformation

    optimizer = OptimizerState(
        {
            "field": AdamState.zeros(2 * size),
            "pose": AdamState.zeros(session.table.size),
            "latent": AdamState.zeros(latents.size),
        }
    )
    logger.info(
        "Training: %d frames, %d iterations, %d field params, deformation=%s refine=%s",
        len(frames), tc.iterations, size, tc.deformation, refine,
    )

    log = _LogWriter(log_path)
    try:
        for iteration in range(1, tc.iterations + 1):
            t = int(rng.integers(len(frames)))
            latent = latents[t] if arch.latent_dim else None
            parts, total, batch, gp, _ = session.step(
                t, NeuralField(coarse, latent), NeuralField(fine, latent), rng, iteration, want_pose=refine
            )

            field_grad = np.concatenate(
                [_field_grad(batch.coarse_grads, size), _field_grad(batch.fine_grads, size)]
            )
            values, optimizer.groups["field"] = adam_step(
                np.concatenate([coarse.values, fine.values]), field_grad, optimizer.groups["field"], tc.lr_field,
                group="field",
            )
            coarse, fine = coarse.with_values(values[:size]), fine.with_values(values[size:])

            if refine:
                session.table, optimizer.groups["pose"] = adam_step(
                    session.table, gp, optimizer.groups["pose"], tc.lr_pose, group="pose"
                )
            if arch.latent_dim:
                g_latent = np.zeros_like(latents)
                g_latent[t] = _latent_grad(batch.coarse_grads, arch.latent_dim) + _latent_grad(
                    batch.fine_grads, arch.latent_dim
                )
                latents, optimizer.groups["latent"] = adam_step(
                    latents, g_latent, optimizer.groups["latent"], tc.lr_latent, group="latent"
                )

            row = TrainLogRow(
                iteration=iteration,
                loss_c=parts.reconstruction,
                loss_p=parts.pose,
                loss_d=parts.background,
                total=total,
                pose_error_deg=session.pose_error(),
            )
            log.write(row)
            if iteration % tc.log_every == 0 or iteration == 1:
                logger.info(
                    "iter %d: L_c=%.5f L_p=%.5f L_d=%.5f total=%.5f",
                    iteration, parts.reconstruction, parts.pose, parts.background, total,
                )

            if checkpoint_dir is not None and tc.checkpoint_every and iteration % tc.checkpoint_every == 0:
                save_checkpoint(
                    _make_checkpoint(coarse, fine, body, session, frames, latents, iteration, tc.deformation),
                    checkpoint_dir,
                )
    finally:
        log.close()

    return _make_checkpoint(coarse, fine, body, session, frames, latents, tc.iterations, tc.deformation)


def _make_checkpoint(
    coarse: FieldParams,
    fine: FieldParams,
    body: SkinnedBody,
    session: _Session,
    frames: list[Frame],
    latents: np.ndarray,
    iteration: int,
    deformation: bool,
) -> Checkpoint:
    return Checkpoint(
        coarse=coarse,
        fine=fine,
        body=body,
        canonical_pose=session.canonical,
        shape=mean_shape([f.shape_init for f in frames]),
        poses=session.table.copy(),
        frame_ids=[f.frame_id for f in frames],
        latents=latents.copy(),
        iteration=iteration,
        deformation=deformation,
        deformation_config=session.warp_config,
        background=session.background.copy(),
    )


def refine_test_poses(
    checkpoint: Checkpoint,
    frames: list[Frame],
    config: Config,
    *,
    iterations: int | None = None,
) -> np.ndarray:
    """Refine the poses of held-out frames with both fields frozen. Returns the pose table."""
    if not frames:
        raise ValueError("refinement needs at least one frame")
    iterations = config.train.refine_iterations if iterations is None else iterations
    initial = np.stack([f.pose_current.as_vector() for f in frames])
    if not checkpoint.deformation:
        logger.warning("Checkpoint was trained without deformation; poses are left unchanged")
        return initial

    warp_config = checkpoint.deformation_config
    run_config = replace(config, deformation=replace(warp_config, canonical_pose=None))
    if warp_config.shape_mode == "per_frame":
        shapes = [f.shape_init for f in frames]
    else:
        shapes = [checkpoint.shape] * len(frames)
    session = _Session(
        frames,
        checkpoint.body,
        run_config,
        deformation=True,
        canonical=checkpoint.canonical_pose,
        shapes=shapes,
        background=checkpoint.background,
    )
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState.zeros(session.table.size)
    latent = np.zeros(checkpoint.coarse.arch.latent_dim) if checkpoint.coarse.arch.latent_dim else None
    coarse = NeuralField(checkpoint.coarse, latent)
    fine = NeuralField(checkpoint.fine, latent)

    for iteration in range(1, iterations + 1):
        t = int(rng.integers(len(frames)))
        parts, total, _, gp, _ = session.step(t, coarse, fine, rng, iteration, want_pose=True)
        session.table, state = adam_step(session.table, gp, state, config.train.lr_pose, group="pose")
        if iteration % config.train.log_every == 0 or iteration == 1:
            logger.info("refine iter %d: L_c=%.5f L_p=%.5f total=%.5f", iteration, parts.reconstruction, parts.pose, total)

    logger.info("Refined %d test poses over %d iterations", len(frames), iterations)
    return session.table
