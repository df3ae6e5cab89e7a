from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from animatable_nerf.body_model import PoseParams, ShapeParams
from animatable_nerf.deformation import DeformationConfig, PoseWarp
from animatable_nerf.radiance_field import FieldOutput, NeuralField, init_field
from animatable_nerf.renderer import (
    Camera,
    RenderConfig,
    Rays,
    camera_for_body,
    generate_rays,
    look_at,
    make_samples,
    orbit_camera,
    render_image,
    render_ray,
    render_rays,
    render_rays_backward,
    sample_importance,
    sample_pdf,
    sample_stratified,
    sample_training_pixels,
    stratified_depths,
)

DOWN_Z = np.array([0.0, 0.0, -1.0])


class _DepthField:
    """Density as a function of depth along -z from the origin; constant red colour."""

    def __init__(self, sigma):
        self.sigma = sigma
        self.calls = 0

    def evaluate(self, points, directions=None):
        points = np.asarray(points).reshape(-1, 3)
        self.calls += points.shape[0]
        color = np.tile([1.0, 0.0, 0.0], (points.shape[0], 1))
        return FieldOutput(color=color, density=self.sigma(-points[:, 2]))


def _slab(t):
    return np.where((t >= 1.0) & (t <= 2.0), 2.0, 0.0)


def _parabola(t):
    return np.where((t >= 1.0) & (t <= 2.0), 8.0 * (t - 1.0) * (2.0 - t), 0.0)


def _camera(**kwargs):
    base = dict(fx=4.0, fy=4.0, cx=8.0, cy=8.0, width=16, height=16, near=1.0, far=4.0)
    base.update(kwargs)
    return Camera(**base)


class TestRaysUnit:
    def test_principal_point_is_optical_axis(self):
        rays = generate_rays(_camera(), np.array([[8, 8]]))
        np.testing.assert_allclose(rays.directions[0], DOWN_Z)
        np.testing.assert_allclose(rays.origins[0], np.zeros(3))

    def test_one_focal_length_right_is_45_degrees(self):
        rays = generate_rays(_camera(), np.array([[8, 12]]))
        np.testing.assert_allclose(rays.directions[0], np.array([1.0, 0.0, -1.0]) / math.sqrt(2.0))

    def test_corner_pixel_unprojection(self):
        camera = _camera(cam_to_world=look_at(np.array([0.0, 0.0, 3.0]), np.zeros(3)))
        rays = generate_rays(camera, np.array([[0, 0]]))
        local = np.array([(0 - 8.0) / 4.0, -(0 - 8.0) / 4.0, -1.0])
        np.testing.assert_allclose(rays.directions[0], local / np.linalg.norm(local), atol=1e-12)
        np.testing.assert_allclose(rays.origins[0], [0.0, 0.0, 3.0])

    def test_out_of_bounds_pixel(self):
        with pytest.raises(ValueError, match="outside"):
            generate_rays(_camera(), np.array([[16, 0]]))

    def test_camera_validation(self):
        with pytest.raises(ValueError, match="near"):
            _camera(near=2.0, far=1.0)


class TestCameraPlacementUnit:
    def test_near_far_bracket_body(self, toy_body):
        camera = _camera(cam_to_world=look_at(np.array([0.0, 0.0, 2.6]), np.zeros(3)))
        fitted = camera_for_body(camera, toy_body.rest_vertices, 0.2, 0.1)
        reach = np.linalg.norm(toy_body.rest_vertices - camera.origin, axis=1)
        assert 0.0 < fitted.near < reach.min()
        assert fitted.far > reach.max()
        assert fitted.fx == camera.fx

    def test_orbit_keeps_distance(self):
        camera = _camera(cam_to_world=look_at(np.array([0.0, 0.5, 2.0]), np.zeros(3)))
        target = np.array([0.0, 0.5, 0.0])
        half = orbit_camera(camera, math.pi, target)
        np.testing.assert_allclose(half.origin, [0.0, 0.5, -2.0], atol=1e-12)
        quarter = orbit_camera(camera, math.pi / 2, target)
        assert np.linalg.norm(quarter.origin - target) == pytest.approx(2.0)


class TestSamplingUnit:
    def test_single_midpoint(self):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 1.0, 3.0, 1, jitter=False)
        np.testing.assert_allclose(samples.depths, [2.0])

    def test_midpoints_closed_form(self):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 1.0, 3.0, 64, jitter=False)
        np.testing.assert_allclose(samples.depths, 1.0 + (np.arange(64) + 0.5) * 2.0 / 64)
        assert samples.deltas[-1] == pytest.approx(2.0)

    def test_jitter_stays_in_bins(self):
        depths = stratified_depths(np.array([1.0]), np.array([3.0]), 32, np.random.default_rng(0))[0]
        bins = np.floor((depths - 1.0) / (2.0 / 32)).astype(int)
        np.testing.assert_array_equal(bins, np.arange(32))
        assert np.all(np.diff(depths) > 0)

    def test_zero_samples_rejected(self):
        with pytest.raises(ValueError, match=">= 1"):
            stratified_depths(np.array([1.0]), np.array([2.0]), 0, None)

    def test_one_hot_weights_fill_one_bin(self):
        edges = np.linspace(0.0, 1.0, 11)[None]
        weights = np.zeros((1, 10))
        weights[0, 6] = 3.0
        draws = sample_pdf(edges, weights, 500, np.random.default_rng(1))
        assert np.all((draws >= 0.6) & (draws <= 0.7))

    def test_uniform_weights_give_uniform_histogram(self):
        edges = np.linspace(0.0, 1.0, 11)[None]
        draws = sample_pdf(edges, np.ones((1, 10)), 100_000, np.random.default_rng(2))[0]
        counts, _ = np.histogram(draws, bins=edges[0])
        sigma = math.sqrt(100_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10_000) < 4 * sigma)

    def test_zero_weights_fall_back_to_uniform(self):
        edges = np.linspace(0.0, 1.0, 9)[None]
        np.testing.assert_array_equal(
            sample_pdf(edges, np.zeros((1, 8)), 40, None), sample_pdf(edges, np.ones((1, 8)), 40, None)
        )

    def test_importance_merges_and_sorts(self):
        coarse = sample_stratified(np.zeros(3), DOWN_Z, 1.0, 3.0, 16, jitter=False)
        weights = np.zeros(16)
        weights[4] = 1.0
        fine = sample_importance(
            coarse, weights, 8, np.random.default_rng(0), near=1.0, far=3.0, origin=np.zeros(3), direction=DOWN_Z
        )
        assert fine.depths.shape == (24,)
        assert np.all(np.diff(fine.depths) >= 0)
        extra = np.setdiff1d(fine.depths, coarse.depths)
        assert np.all((extra >= 1.5) & (extra <= 1.625))


class TestRenderRayUnit:
    def test_empty_space_is_background(self):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, 64, jitter=False)
        out = render_ray(_DepthField(lambda t: np.zeros_like(t)), np.zeros(3), DOWN_Z, samples, None)
        np.testing.assert_array_equal(out.color, np.zeros(3))
        assert out.integral_density == 0.0
        np.testing.assert_array_equal(out.pixel, np.ones(3))

    def test_homogeneous_medium_matches_transmittance(self):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, 4096, jitter=False)
        out = render_ray(_DepthField(_slab), np.zeros(3), DOWN_Z, samples, None)
        expected = 1.0 - math.exp(-2.0)
        assert expected == pytest.approx(0.8647, abs=1e-4)
        np.testing.assert_allclose(out.color, [expected, 0.0, 0.0], atol=1e-3)
        assert out.integral_density == pytest.approx(expected, abs=1e-3)

    def test_quadrature_error_shrinks_with_samples(self):
        expected = 1.0 - math.exp(-4.0 / 3.0)
        errors = []
        for n in (64, 256, 1024, 4096):
            samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, n, jitter=False)
            out = render_ray(_DepthField(_parabola), np.zeros(3), DOWN_Z, samples, None)
            errors.append(abs(out.integral_density - expected))
        assert errors == sorted(errors, reverse=True)
        assert errors[-1] < 1e-3

    def test_opaque_sample(self):
        samples = make_samples(np.zeros(3), DOWN_Z, np.array([1.5]), 1.0)
        out = render_ray(_DepthField(lambda t: np.full_like(t, 50.0)), np.zeros(3), DOWN_Z, samples, None)
        assert out.integral_density == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(out.pixel, [1.0, 0.0, 0.0], atol=1e-12)

    def test_density_is_telescoping_product(self):
        samples = sample_stratified(np.zeros(3), DOWN_Z, 0.5, 2.5, 128, np.random.default_rng(0))
        out = render_ray(_DepthField(_parabola), np.zeros(3), DOWN_Z, samples, None)
        tau = _parabola(samples.depths) * samples.deltas
        assert out.integral_density == pytest.approx(1.0 - np.prod(np.exp(-tau)), abs=1e-12)
        assert 0.0 <= out.integral_density <= 1.0
        assert np.all(out.color <= out.integral_density + 1e-12)

    def test_masked_points_skip_field(self, toy_body):
        warp = PoseWarp(
            toy_body, PoseParams.zeros(toy_body.joint_count), ShapeParams.zeros(toy_body.shape_count), DeformationConfig()
        )
        samples = sample_stratified(np.array([0.0, 0.2, 2.5]), DOWN_Z, 1.0, 4.0, 128, jitter=False)
        field = _DepthField(lambda t: np.ones_like(t))
        out = render_ray(field, np.array([0.0, 0.2, 2.5]), DOWN_Z, samples, warp)
        inside = int(warp.mask(samples.points).sum())
        assert 0 < inside < 128
        assert out.evaluations == inside
        assert field.calls == inside


class TestTrainingPixelsUnit:
    def _mask(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[16:48, 16:48] = 1
        return mask

    def test_ninety_percent_foreground(self):
        mask = self._mask()
        pixels = sample_training_pixels(mask, 1024, 0.9, np.random.default_rng(0))
        values = mask[pixels[:, 0], pixels[:, 1]]
        assert pixels.shape == (1024, 2)
        assert int(values.sum()) == 922
        assert int((values == 0).sum()) == 102

    def test_all_foreground(self):
        pixels = sample_training_pixels(np.ones((8, 8)), 100, 0.9, np.random.default_rng(0))
        assert pixels.shape == (100, 2)

    def test_fraction_zero_is_all_background(self):
        mask = self._mask()
        pixels = sample_training_pixels(mask, 50, 0.0, np.random.default_rng(0))
        assert not mask[pixels[:, 0], pixels[:, 1]].any()


class TestRenderImageUnit:
    def test_camera_facing_away_sees_background(self):
        camera = _camera(near=0.5, far=1.0, cam_to_world=look_at(np.array([0.0, 0.0, 2.5]), np.array([0.0, 0.0, 5.0])))
        image = render_image(_SphereField(), None, camera, None, RenderConfig(coarse_samples=16, importance_samples=8))
        np.testing.assert_array_equal(image.image, np.ones((16, 16, 3)))
        np.testing.assert_array_equal(image.density, np.zeros((16, 16)))

    def test_deterministic_without_jitter(self, tiny_arch, small_camera):
        params = init_field(tiny_arch, seed=3)
        config = RenderConfig(coarse_samples=8, importance_samples=4, chunk_rays=100)
        a = render_image(NeuralField(params), NeuralField(params), small_camera, None, config)
        b = render_image(NeuralField(params), NeuralField(params), small_camera, None, config, workers=3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.depth, b.depth)
        assert a.image.shape == (16, 16, 3)


class _SphereField:
    def evaluate(self, points, directions=None):
        points = np.asarray(points).reshape(-1, 3)
        inside = np.linalg.norm(points, axis=1) < 0.3
        return FieldOutput(color=np.full((points.shape[0], 3), 0.5), density=np.where(inside, 5.0, 0.0))


class _FrozenWarp:
    """A warp at a perturbed pose that reuses another warp's neighbours and mask."""

    def __init__(self, warp, neighbors, mask):
        self._warp = warp
        self._neighbors = neighbors
        self._mask = mask

    def neighbors(self, points):
        return self._neighbors

    def mask(self, points, neighbors=None):
        return self._mask

    def warp(self, points, neighbors=None):
        return self._warp.warp(points, neighbors)


class TestRenderBackwardUnit:
    def _setup(self, toy_body, tiny_arch, random_pose):
        config = DeformationConfig()
        pose = random_pose(toy_body, seed=12, scale=0.15)
        shape = ShapeParams.zeros(toy_body.shape_count)
        warp = PoseWarp(toy_body, pose, shape, config)
        params = init_field(tiny_arch, seed=13, radius=1.0)
        origin = np.array([0.0, 0.0, 2.5])
        targets = warp.posed_vertices[::15][:5]
        directions = targets - origin
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        rays = Rays(np.tile(origin, (len(targets), 1)), directions, np.zeros((len(targets), 2), dtype=np.int64))
        depths = stratified_depths(np.full(len(rays), 1.5), np.full(len(rays), 3.5), 24, None)
        rng = np.random.default_rng(14)
        grad_pixel = rng.normal(size=(len(rays), 3))
        grad_density = rng.normal(size=len(rays))
        return config, pose, shape, warp, params, rays, depths, grad_pixel, grad_density

    def _loss(self, field, rays, depths, warp, grad_pixel, grad_density):
        out, _ = render_rays(field, rays, depths, warp, np.ones(3), 2.0)
        return float(np.sum(out.pixel * grad_pixel) + np.sum(out.integral_density * grad_density))

    def test_field_gradient_matches_finite_differences(self, toy_body, tiny_arch, random_pose):
        _, _, _, warp, params, rays, depths, gp, gd = self._setup(toy_body, tiny_arch, random_pose)
        _, tape = render_rays(NeuralField(params), rays, depths, warp, np.ones(3), 2.0, record=True)
        assert tape.active.any()
        grads = render_rays_backward(tape, gp, gd)

        h = 1e-6
        for i in np.random.default_rng(0).choice(params.values.size, 25, replace=False):
            plus, minus = params.values.copy(), params.values.copy()
            plus[i] += h
            minus[i] -= h
            numeric = (
                self._loss(NeuralField(params.with_values(plus)), rays, depths, warp, gp, gd)
                - self._loss(NeuralField(params.with_values(minus)), rays, depths, warp, gp, gd)
            ) / (2 * h)
            assert grads.field.params[i] == pytest.approx(numeric, rel=1e-4, abs=1e-8)

    def test_pose_gradient_matches_frozen_weight_differences(self, toy_body, tiny_arch, random_pose):
        config, pose, shape, warp, params, rays, depths, gp, gd = self._setup(toy_body, tiny_arch, random_pose)
        field = NeuralField(params)
        _, tape = render_rays(field, rays, depths, warp, np.ones(3), 2.0, record=True)
        grads = render_rays_backward(tape, gp, gd, want_pose=True)
        all_neighbors = warp.neighbors(tape.points)
        active = tape.active
        assert active.any()

        vec = pose.as_vector()
        h = 1e-6
        for p in range(vec.size):
            values = []
            for sign in (1.0, -1.0):
                moved = vec.copy()
                moved[p] += sign * h
                moved_warp = PoseWarp(
                    toy_body, PoseParams.from_vector(moved, toy_body.joint_count), shape, config, warp.canonical
                )
                values.append(self._loss(field, rays, depths, _FrozenWarp(moved_warp, all_neighbors, active), gp, gd))
            numeric = (values[0] - values[1]) / (2 * h)
            assert grads.pose[p] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_no_pose_gradient_without_warp(self, tiny_arch, small_camera):
        params = init_field(tiny_arch, seed=0)
        rays = generate_rays(small_camera, np.array([[8, 8], [3, 4]]))
        depths = stratified_depths(np.full(2, 1.0), np.full(2, 4.0), 8, None)
        _, tape = render_rays(NeuralField(params), rays, depths, None, np.ones(3), 3.0, record=True)
        grads = render_rays_backward(tape, np.ones((2, 3)), want_pose=True)
        assert grads.pose is None
        assert grads.field.params.shape == params.values.shape


def test_render_config_validation():
    with pytest.raises(ValueError, match="foreground_fraction"):
        RenderConfig(foreground_fraction=1.5)
    assert replace(RenderConfig(), coarse_samples=4).coarse_samples == 4
