from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

from animatable_nerf.body_model import PoseParams, ShapeParams, SkinnedBody, vertex_transforms
from animatable_nerf.deformation import (
    DeformationConfig,
    PoseWarp,
    SpatialIndex,
    build_index,
    canonical_pose,
    mask_indicator,
    neighbor_weights,
    resolve_canonical_pose,
    warp_pose_jacobian,
    warp_to_canonical,
    weighted_distance,
)


def _brute_knn(vertices: np.ndarray, point: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    dist = np.linalg.norm(vertices - point, axis=1)
    order = np.lexsort((np.arange(vertices.shape[0]), dist))[:k]
    return dist[order], order


def _posed_index(body: SkinnedBody, pose: PoseParams) -> SpatialIndex:
    return build_index(vertex_transforms(body, ShapeParams.zeros(body.shape_count), pose).posed_vertices)


class TestSpatialIndexUnit:
    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        vertices = rng.random((1000, 3))
        index = SpatialIndex(vertices)
        queries = rng.random((100, 3))
        dist, idx = index.query(queries, 4)
        for q in range(100):
            want_dist, want_idx = _brute_knn(vertices, queries[q], 4)
            np.testing.assert_array_equal(idx[q], want_idx)
            np.testing.assert_allclose(dist[q], want_dist, atol=1e-15)

    def test_ties_break_by_index(self):
        vertices = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 5.0]])
        _, idx = SpatialIndex(vertices).query(np.zeros((1, 3)), 2)
        np.testing.assert_array_equal(idx[0], [0, 1])

    def test_k_larger_than_vertex_count(self):
        _, idx = SpatialIndex(np.eye(3)).query(np.zeros((1, 3)), 8)
        assert idx.shape == (1, 3)

    def test_empty_vertices_rejected(self):
        with pytest.raises(ValueError, match="zero vertices"):
            SpatialIndex(np.zeros((0, 3)))

    def test_non_finite_vertices_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            SpatialIndex(np.array([[0.0, np.inf, 0.0]]))


class TestNeighborWeightsUnit:
    def test_matches_exp_normalize_oracle(self, chain_body):
        config = DeformationConfig(k_neighbors=4, bandwidth=0.1)
        index = build_index(chain_body.rest_vertices)
        point = np.array([0.9, 0.05, -0.02])
        nb = neighbor_weights(point, index, chain_body, config)

        dist, idx = _brute_knn(chain_body.rest_vertices, point, 4)
        b = chain_body.blend_weights
        omega = np.array([np.exp(-dist[i] * np.linalg.norm(b[idx[i]] - b[idx[0]]) / (2 * 0.1**2)) for i in range(4)])
        np.testing.assert_array_equal(nb.indices, idx)
        np.testing.assert_allclose(nb.weights, omega / omega.sum(), atol=1e-12)
        assert nb.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_batch_matches_single(self, chain_body):
        config = DeformationConfig()
        index = build_index(chain_body.rest_vertices)
        points = np.random.default_rng(2).normal(size=(5, 3))
        batch = neighbor_weights(points, index, chain_body, config)
        for n in range(5):
            single = neighbor_weights(points[n], index, chain_body, config)
            np.testing.assert_array_equal(batch.indices[n], single.indices)
            np.testing.assert_allclose(batch.weights[n], single.weights)

    def test_weighted_distance_and_mask(self, chain_body):
        config = DeformationConfig(mask_threshold=0.2)
        index = build_index(chain_body.rest_vertices)
        on_surface = chain_body.rest_vertices[3]
        far = np.array([0.0, 10.0, 0.0])
        assert mask_indicator(far, index, chain_body, config) == 0
        assert weighted_distance(far, index, chain_body, config) > 9.0
        assert mask_indicator(on_surface + 1e-3, index, chain_body, config) == 1
        np.testing.assert_array_equal(
            mask_indicator(np.stack([far, on_surface]), index, chain_body, config), [0, 1]
        )

    def test_non_finite_point_rejected(self, chain_body):
        index = build_index(chain_body.rest_vertices)
        with pytest.raises(ValueError, match="non-finite"):
            neighbor_weights(np.array([np.nan, 0.0, 0.0]), index, chain_body, DeformationConfig())

    def test_mask_shrinks_along_outward_rays(self, toy_body):
        config = DeformationConfig()
        posed = vertex_transforms(toy_body, ShapeParams.zeros(toy_body.shape_count), PoseParams.zeros(6)).posed_vertices
        index = build_index(posed)
        normals = trimesh.Trimesh(posed, toy_body.faces, process=False).vertex_normals
        steps = np.linspace(0.0, 0.5, 40)
        for v in range(0, posed.shape[0], 7):
            ray = posed[v] + steps[:, None] * normals[v]
            d = weighted_distance(ray, index, toy_body, config)
            inside = mask_indicator(ray, index, toy_body, config)
            assert inside[0] == 1
            rising = np.diff(d) > 0.0
            assert np.all(inside[1:][rising] <= inside[:-1][rising])
            np.testing.assert_array_equal(inside, d <= config.mask_threshold)


class TestWarpUnit:
    def test_identity_at_canonical_pose(self, toy_body):
        config = DeformationConfig()
        canonical = resolve_canonical_pose(toy_body, config)
        warp = PoseWarp(toy_body, canonical, ShapeParams.zeros(toy_body.shape_count), config, canonical)
        points = np.random.default_rng(0).uniform(-1.0, 1.0, size=(10_000, 3))
        np.testing.assert_allclose(warp.warp(points), points, atol=1e-10)

    def test_one_hot_weights_give_rigid_inverse(self, chain_body):
        weights = np.zeros_like(chain_body.blend_weights)
        weights[:, 1] = 1.0
        body = replace(chain_body, blend_weights=weights, shape_basis=np.zeros((0, 12, 3)))
        rotations = np.zeros((3, 3))
        rotations[1] = (0.0, 0.0, np.pi / 2)
        pose = PoseParams.create(np.zeros(3), rotations)
        config = DeformationConfig(canonical_preset="T")
        warp = PoseWarp(body, pose, ShapeParams.zeros(0), config, PoseParams.zeros(3))

        joint = body.joint_rest_positions[1]
        rot = Rotation.from_rotvec(rotations[1]).as_matrix()
        points = np.array([[1.5, 0.3, 0.0], [1.0, 1.0, 0.2], [0.8, -0.1, 0.1]])
        expected = (points - joint) @ rot + joint
        np.testing.assert_allclose(warp.warp(points), expected, atol=1e-12)

    def test_posed_vertices_return_to_canonical(self, chain_body, random_pose):
        config = DeformationConfig(k_neighbors=1, canonical_preset="T")
        shape = ShapeParams.zeros(chain_body.shape_count)
        pose = random_pose(chain_body, seed=1, scale=0.3)
        warp = PoseWarp(chain_body, pose, shape, config, PoseParams.zeros(3))
        np.testing.assert_allclose(warp.warp(warp.posed_vertices), chain_body.rest_vertices, atol=1e-10)

    def test_function_form_matches_warp_state(self, toy_body, random_pose):
        config = DeformationConfig()
        pose = random_pose(toy_body, seed=9, scale=0.2)
        shape = ShapeParams.zeros(toy_body.shape_count)
        warp = PoseWarp(toy_body, pose, shape, config)
        points = warp.posed_vertices[::7] + 0.01
        out = warp_to_canonical(points, pose, shape, toy_body, _posed_index(toy_body, pose), config)
        np.testing.assert_allclose(out, warp.warp(points), atol=1e-12)


class TestPoseJacobianUnit:
    def _fd_jacobian(self, body, pose, shape, config, canonical, points, nb, h=1e-5):
        vec = pose.as_vector()
        jac = np.zeros((points.shape[0], 3, vec.size))
        for p in range(vec.size):
            up, down = vec.copy(), vec.copy()
            up[p] += h
            down[p] -= h
            w_up = PoseWarp(body, PoseParams.from_vector(up, body.joint_count), shape, config, canonical)
            w_down = PoseWarp(body, PoseParams.from_vector(down, body.joint_count), shape, config, canonical)
            jac[:, :, p] = (w_up.warp(points, nb) - w_down.warp(points, nb)) / (2 * h)
        return jac

    @pytest.mark.parametrize("at_canonical", [True, False])
    def test_matches_finite_differences(self, small_body, random_pose, at_canonical):
        config = DeformationConfig(k_neighbors=4, bandwidth=0.2)
        canonical = random_pose(small_body, seed=20, scale=0.2)
        pose = canonical if at_canonical else random_pose(small_body, seed=21, scale=0.3)
        shape = ShapeParams(np.array([0.3, -0.2, 0.5]))
        warp = PoseWarp(small_body, pose, shape, config, canonical)
        points = warp.posed_vertices[:6] + np.random.default_rng(3).normal(scale=0.05, size=(6, 3))
        nb = warp.neighbors(points)

        analytic = warp.pose_jacobian(points, nb)
        numeric = self._fd_jacobian(small_body, pose, shape, config, canonical, points, nb)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_vjp_matches_jacobian_contraction(self, small_body, random_pose):
        config = DeformationConfig(k_neighbors=3)
        canonical = PoseParams.zeros(small_body.joint_count)
        pose = random_pose(small_body, seed=5, scale=0.3)
        shape = ShapeParams(np.array([0.1, 0.0, -0.4]))
        warp = PoseWarp(small_body, pose, shape, config, canonical)
        points = warp.posed_vertices[:8]
        nb = warp.neighbors(points)
        grad = np.random.default_rng(4).normal(size=(8, 3))
        expected = np.einsum("na,nap->p", grad, warp.pose_jacobian(points, nb))
        np.testing.assert_allclose(warp.pose_vjp(points, nb, grad), expected, rtol=1e-10, atol=1e-12)

    def test_root_translation_block(self, chain_body, random_pose):
        config = DeformationConfig(canonical_preset="T")
        pose = random_pose(chain_body, seed=6)
        shape = ShapeParams.zeros(chain_body.shape_count)
        points = np.array([[0.5, 0.1, 0.0]])
        jac = warp_pose_jacobian(points, pose, shape, chain_body, _posed_index(chain_body, pose), config)
        warp = PoseWarp(chain_body, pose, shape, config)
        nb = warp.neighbors(points)
        numeric = self._fd_jacobian(chain_body, pose, shape, config, warp.canonical, points, nb)
        np.testing.assert_allclose(jac[:, :, :3], numeric[:, :, :3], rtol=1e-5, atol=1e-8)


class TestCanonicalPoseUnit:
    def test_t_pose_is_zero(self, toy_body):
        assert canonical_pose(toy_body, "T") == PoseParams.zeros(toy_body.joint_count)

    def test_x_pose_spreads_limbs(self, toy_body):
        pose = canonical_pose(toy_body, "X")
        shoulder = toy_body.joint_index("l_shoulder")
        np.testing.assert_allclose(pose.joint_rotations[shoulder], [0.0, 0.0, np.radians(45.0)])
        assert not np.any(pose.root_translation)

    def test_a_pose_averages_training_poses(self, toy_body, random_pose):
        poses = [random_pose(toy_body, seed=s, scale=0.2) for s in range(4)]
        pose = canonical_pose(toy_body, "A", poses)
        mean = np.mean([p.joint_rotations for p in poses], axis=0)
        np.testing.assert_allclose(pose.joint_rotations[1:], mean[1:])
        np.testing.assert_array_equal(pose.joint_rotations[0], np.zeros(3))

    def test_explicit_pose_wins(self, toy_body, random_pose):
        explicit = random_pose(toy_body, seed=2)
        config = DeformationConfig(canonical_pose=explicit)
        assert resolve_canonical_pose(toy_body, config) == explicit

    def test_unknown_preset(self, toy_body):
        with pytest.raises(ValueError, match="unknown canonical preset"):
            canonical_pose(toy_body, "Y")


class TestDeformationConfigUnit:
    @pytest.mark.parametrize(
        ("kwargs", "message"),
        [
            ({"k_neighbors": 0}, "k_neighbors"),
            ({"bandwidth": 0.0}, "bandwidth"),
            ({"mask_threshold": -1.0}, "mask_threshold"),
            ({"canonical_preset": "Q"}, "canonical_preset"),
            ({"shape_mode": "median"}, "shape_mode"),
        ],
    )
    def test_invalid_values(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            DeformationConfig(**kwargs)
