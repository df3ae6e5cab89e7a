#!/usr/bin/env -S python3 -u
"""Acceptance experiments for animatable-nerf, one line per criterion.

The gradient and oracle criteria run the matching unit-test classes; the
rest synthesize a dataset, train on it and measure the result.

Usage:
    uv run scripts/run_acceptance.py [quick|full] [workdir]

``quick`` shrinks the scene and the iteration counts so the whole run
finishes in minutes; its numbers are indicative only. ``full`` uses the
default 64x64, 30-frame scene.
"""

from __future__ import annotations

import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from animatable_nerf.body_model import ShapeParams, make_toy_body
from animatable_nerf.checkpoint import CHECKPOINT_FILE, load_checkpoint
from animatable_nerf.commands.evaluate import evaluate_renders
from animatable_nerf.commands.extract_mesh import extract_canonical_mesh
from animatable_nerf.commands.render_view import render_views
from animatable_nerf.commands.synth import synthesize
from animatable_nerf.commands.train import train_dataset
from animatable_nerf.config import Config, load_config
from animatable_nerf.dataset import load_dataset, load_pose_sequence
from animatable_nerf.deformation import DeformationConfig, PoseWarp, canonical_pose
from animatable_nerf.evalx import mesh_metrics, psnr
from animatable_nerf.geometry import GridSpec, extract_mesh, load_obj
from animatable_nerf.inference import pose_warp, render_pose
from animatable_nerf.radiance_field import FieldOutput
from animatable_nerf.renderer import render_image, render_ray, sample_stratified
from animatable_nerf.synth_data import NOVEL_POSES_FILE, build_scene, gt_mesh_file
from animatable_nerf.trainer import pose_error_deg
from animatable_nerf.types import CameraSpec, SceneSpec

TESTS = Path(__file__).resolve().parent.parent / "tests"
DOWN_Z = np.array([0.0, 0.0, -1.0])


@dataclass(frozen=True)
class Profile:
    frames: int
    size: int
    iterations: int
    batch_rays: int
    coarse_samples: int
    importance_samples: int
    mesh_resolution: int
    novel_poses: int


PROFILES = {
    "quick": Profile(
        frames=12, size=32, iterations=400, batch_rays=256, coarse_samples=32, importance_samples=16,
        mesh_resolution=48, novel_poses=3,
    ),
    "full": Profile(
        frames=30, size=64, iterations=6000, batch_rays=1024, coarse_samples=64, importance_samples=32,
        mesh_resolution=96, novel_poses=10,
    ),
}


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def report(number: int, name: str, passed: bool, detail: str) -> bool:
    status = "PASS" if passed else "FAIL"
    print(f"[{status}] {number:>2} {name}: {detail}", flush=True)
    return passed


def scene_spec(profile: Profile) -> SceneSpec:
    base = SceneSpec()
    focal = base.camera.focal * profile.size / base.camera.width
    return base.model_copy(
        update={"frame_count": profile.frames, "camera": CameraSpec(width=profile.size, height=profile.size, focal=focal)}
    )


def base_config(profile: Profile) -> Config:
    return load_config(
        overrides={
            "train.iterations": profile.iterations,
            "train.batch_rays": profile.batch_rays,
            "render.coarse_samples": profile.coarse_samples,
            "render.importance_samples": profile.importance_samples,
            "mesh.resolution": profile.mesh_resolution,
            "run.log_level": "warning",
        }
    )


def with_train(config: Config, **changes: object) -> Config:
    return replace(config, train=replace(config.train, **changes))


# --- Property criteria ---


def check_warp_identity() -> bool:
    start = time.perf_counter()
    body = make_toy_body(seed=0)
    config = DeformationConfig()
    canonical = canonical_pose(body, config.canonical_preset)
    warp = PoseWarp(body, canonical, ShapeParams.zeros(body.shape_count), config, canonical)
    points = np.random.default_rng(0).uniform(-1.0, 1.0, size=(10_000, 3))
    error = float(np.abs(warp.warp(points) - points).max())
    elapsed = time.perf_counter() - start
    return report(1, "warp identity", error <= 1e-10 and elapsed < 1.0, f"max error {error:.2e} in {elapsed:.2f} s")


class _DepthField:
    def __init__(self, sigma) -> None:
        self.sigma = sigma

    def evaluate(self, points: np.ndarray, directions: np.ndarray | None = None) -> FieldOutput:
        points = np.asarray(points).reshape(-1, 3)
        return FieldOutput(color=np.ones((points.shape[0], 3)), density=self.sigma(-points[:, 2]))


def check_quadrature() -> bool:
    start = time.perf_counter()
    slab = _DepthField(lambda t: np.where((t >= 1.0) & (t <= 2.0), 2.0, 0.0))
    samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, 4096, jitter=False)
    slab_error = abs(render_ray(slab, np.zeros(3), DOWN_Z, samples, None).integral_density - (1.0 - np.exp(-2.0)))

    bump = _DepthField(lambda t: np.where((t >= 1.0) & (t <= 2.0), 8.0 * (t - 1.0) * (2.0 - t), 0.0))
    expected = 1.0 - np.exp(-4.0 / 3.0)
    errors = []
    for n in (64, 256, 1024, 4096):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, n, jitter=False)
        errors.append(abs(render_ray(bump, np.zeros(3), DOWN_Z, samples, None).integral_density - expected))
    elapsed = time.perf_counter() - start
    passed = slab_error < 1e-3 and errors == sorted(errors, reverse=True) and elapsed < 1.0
    trend = ", ".join(f"{e:.1e}" for e in errors)
    return report(2, "render quadrature", passed, f"slab error {slab_error:.1e}; errors {trend}")


def check_unit_tests(number: int, name: str, selection: list[str]) -> bool:
    import pytest

    start = time.perf_counter()
    code = pytest.main(["-q", "-p", "no:cacheprovider", *[str(TESTS / s) for s in selection]])
    elapsed = time.perf_counter() - start
    return report(number, name, code == 0 and elapsed < 60.0, f"pytest exit {int(code)} in {elapsed:.1f} s")


def check_sphere_extraction() -> tuple[bool, str]:
    class _Ball:
        def evaluate(self, points, directions=None):
            inside = np.linalg.norm(points, axis=1) < 0.5
            return FieldOutput(color=np.zeros((len(points), 3)), density=np.where(inside, 100.0, 0.0))

    grid = GridSpec((64, 64, 64), (-0.8, -0.8, -0.8), (0.8, 0.8, 0.8))
    radii = np.linalg.norm(extract_mesh(_Ball(), grid).vertices, axis=1)
    deviation = float(np.abs(radii - 0.5).max())
    diagonal = float(np.linalg.norm(grid.spacing))
    return deviation <= diagonal, f"sphere deviation {deviation:.4f} <= voxel diagonal {diagonal:.4f}"


# --- Training experiments ---


@dataclass
class Arm:
    checkpoint_dir: Path
    views_dir: Path
    psnr: float


def run_arm(name: str, data: Path, work: Path, config: Config, *, refine: bool = False) -> Arm:
    log(f"Training arm {name!r}...")
    ckpt_dir = work / name / "ckpt"
    views_dir = work / name / "views"
    checkpoint = train_dataset(data, ckpt_dir, config)
    dataset = load_dataset(data)
    render_views(checkpoint, dataset.split("test"), views_dir, config, refine=refine)
    metrics = evaluate_renders(views_dir, data, work / name / "report")
    log(f"  {name}: held-out PSNR {metrics.mean_psnr:.2f} dB")
    return Arm(ckpt_dir, views_dir, metrics.mean_psnr)


def background_density(arm: Arm, data: Path, config: Config) -> float:
    """Mean rendered integral density over GT background pixels of the held-out views."""
    checkpoint = load_checkpoint(arm.checkpoint_dir)
    values = []
    for frame in load_dataset(data).split("test"):
        image, _ = render_pose(checkpoint, frame.pose_current, frame.camera, config)
        values.append(image.density[frame.mask == 0])
    return float(np.concatenate(values).mean())


class _Everywhere:
    def evaluate(self, points, directions=None):
        return FieldOutput(color=np.zeros((len(points), 3)), density=np.full(len(points), 1e3))


def check_novel_pose(arm: Arm, data: Path, config: Config, floor: float) -> bool:
    checkpoint = load_checkpoint(arm.checkpoint_dir)
    dataset = load_dataset(data)
    scene = build_scene(dataset.manifest.scene, config.seed, deformation=config.deformation)
    poses, _ = load_pose_sequence(data / NOVEL_POSES_FILE, checkpoint.body.joint_count)
    camera = dataset.frames[0].camera
    scores, stray = [], 0
    for pose in poses:
        predicted, used = render_pose(checkpoint, pose, camera, config)
        target, _ = scene.render(pose, config.render, camera=used)
        scores.append(psnr(predicted.image, target.image))
        # The 3D mask gates everything farther than the threshold from the posed surface.
        reach = render_image(_Everywhere(), None, used, pose_warp(checkpoint, pose), config.render)
        stray += int(np.sum((predicted.density > 0.1) & (reach.density < 0.5)))
    mean = float(np.mean(scores))
    passed = mean >= floor and stray == 0
    return report(8, "novel pose", passed, f"PSNR {mean:.2f} dB (floor {floor:.2f}); {stray} stray pixels")


def run_experiments(profile: Profile, work: Path) -> list[bool]:
    results = []
    config = base_config(profile)
    spec = scene_spec(profile)

    clean = work / "data_clean"
    synthesize(spec, clean, config, novel_pose_count=profile.novel_poses, mesh_resolution=profile.mesh_resolution)

    start = time.perf_counter()
    deformed = run_arm("deformation_on", clean, work, config)
    baseline = run_arm("deformation_off", clean, work, with_train(config, deformation=False))
    gap = deformed.psnr - baseline.psnr
    results.append(
        report(
            4,
            "deformation gap",
            gap >= 5.0,
            f"{deformed.psnr:.2f} vs {baseline.psnr:.2f} dB (+{gap:.2f}) in {time.perf_counter() - start:.0f} s",
        )
    )

    noisy = work / "data_noisy"
    synthesize(spec, noisy, config, noise_deg=5.0, noise_seed=1, novel_pose_count=1, mesh_resolution=16)
    refined = run_arm("refine_on", noisy, work, config, refine=True)
    frozen = run_arm("refine_off", noisy, work, with_train(config, refine_poses=False))
    train_frames = load_dataset(noisy).split("train")
    gt = np.stack([f.pose_gt.as_vector() for f in train_frames])
    initial = pose_error_deg(np.stack([f.pose_init.as_vector() for f in train_frames]), gt)
    final = pose_error_deg(load_checkpoint(refined.checkpoint_dir).poses, gt)
    results.append(
        report(
            5,
            "refinement gap",
            refined.psnr - frozen.psnr >= 3.0 and final <= 0.5 * initial,
            f"{refined.psnr:.2f} vs {frozen.psnr:.2f} dB; pose error {initial:.2f} -> {final:.2f} deg",
        )
    )

    plain = run_arm("no_background_reg", clean, work, with_train(config, lambda_d=0.0))
    with_reg = background_density(deformed, clean, config)
    without = background_density(plain, clean, with_train(config, lambda_d=0.0))
    results.append(
        report(6, "background regularization", with_reg < 0.05 and without > with_reg, f"{with_reg:.4f} vs {without:.4f}")
    )

    checkpoint = load_checkpoint(deformed.checkpoint_dir)
    mesh, _ = extract_canonical_mesh(checkpoint, config)
    gt_mesh = load_obj(clean / gt_mesh_file(config.deformation.canonical_preset))
    height_cm = float(np.ptp(checkpoint.body.rest_vertices[:, 1])) * 100.0
    sphere_ok, sphere_detail = check_sphere_extraction()
    if mesh.is_empty:
        results.append(report(7, "geometry", False, f"empty mesh; {sphere_detail}"))
    else:
        row = mesh_metrics("canonical", mesh, gt_mesh, replace(config.mesh, alignment="iterative"))
        limit = 0.02 * height_cm
        results.append(
            report(
                7,
                "geometry",
                row.chamfer_cm < limit and sphere_ok,
                f"Chamfer {row.chamfer_cm:.2f} cm (limit {limit:.2f}); {sphere_detail}",
            )
        )

    results.append(check_novel_pose(deformed, clean, config, deformed.psnr - 5.0))

    repeat = run_arm("deformation_on_repeat", clean, work, config)
    same_ckpt = (deformed.checkpoint_dir / CHECKPOINT_FILE).read_bytes() == (
        repeat.checkpoint_dir / CHECKPOINT_FILE
    ).read_bytes()
    same_csv = (work / "deformation_on" / "report" / "metrics.csv").read_bytes() == (
        work / "deformation_on_repeat" / "report" / "metrics.csv"
    ).read_bytes()
    results.append(report(9, "determinism", same_ckpt and same_csv, f"checkpoint {same_ckpt}, metrics {same_csv}"))
    return results


def main() -> None:
    name = sys.argv[1] if len(sys.argv) > 1 else "quick"
    if name not in PROFILES:
        log(f"Unknown profile {name!r}; expected one of {', '.join(PROFILES)}")
        sys.exit(2)
    profile = PROFILES[name]

    results = [
        check_warp_identity(),
        check_quadrature(),
        check_unit_tests(
            3,
            "gradient suite",
            [
                "test_radiance_field_unit.py::TestFieldBackwardUnit",
                "test_renderer_unit.py::TestRenderBackwardUnit",
                "test_trainer_unit.py::TestLossesUnit",
            ],
        ),
        check_unit_tests(
            10,
            "oracle equivalence",
            [
                "test_deformation_unit.py::TestWarpUnit",
                "test_trainer_unit.py::TestAdamUnit",
                "test_evalx_unit.py::TestImageMetricsUnit",
                "test_geometry_unit.py::TestDistancesUnit",
            ],
        ),
    ]

    if len(sys.argv) > 2:
        work = Path(sys.argv[2])
        work.mkdir(parents=True, exist_ok=True)
        results += run_experiments(profile, work)
    else:
        with tempfile.TemporaryDirectory(prefix="anerf-acceptance-") as tmp:
            results += run_experiments(profile, Path(tmp))

    log(f"{sum(results)}/{len(results)} criteria passed ({name} profile)")
    sys.exit(0 if all(results) else 1)


if __name__ == "__main__":
    main()
