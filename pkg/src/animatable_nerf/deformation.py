"""Pose-guided warp from observation space to the canonical body pose.

A sample point is carried back to canonical space by blending the relative
transforms ``M_i(theta0) M_i(theta_t)^-1`` of its k nearest posed vertices,
weighted by distance and blend-weight similarity. The same neighbour weights
give the weighted surface distance used as a hard 3D mask.

Gradients w.r.t. the frame pose hold the neighbour set, the weights and the
posed vertex positions fixed; only the relative transforms vary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from animatable_nerf.body_model import (
    PoseParams,
    ShapeParams,
    SkinnedBody,
    blendshape_offsets,
    pose_features_jacobian,
    skinning_transforms_jacobian,
    vertex_transforms,
)

logger = logging.getLogger(__name__)

CANONICAL_PRESETS = ("A", "T", "X")
SHAPE_MODES = ("mean", "per_frame")

# Extra candidates fetched so index ties at the k-th distance can be resolved.
_TIE_SLACK = 8


@dataclass(frozen=True)
class DeformationConfig:
    k_neighbors: int = 4
    bandwidth: float = 0.1
    mask_threshold: float = 0.2
    canonical_preset: str = "X"
    shape_mode: str = "mean"
    canonical_pose: PoseParams | None = None

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if not self.bandwidth > 0.0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")
        if not self.mask_threshold > 0.0:
            raise ValueError(f"mask_threshold must be > 0, got {self.mask_threshold}")
        if self.canonical_preset not in CANONICAL_PRESETS:
            raise ValueError(
                f"canonical_preset must be one of {', '.join(CANONICAL_PRESETS)}, got {self.canonical_preset!r}"
            )
        if self.shape_mode not in SHAPE_MODES:
            raise ValueError(
                f"shape_mode must be one of {', '.join(SHAPE_MODES)}, got {self.shape_mode!r}"
            )


# --- Canonical pose presets ---

_X_POSE_DEG = {
    "l_shoulder": (0.0, 0.0, 45.0),
    "r_shoulder": (0.0, 0.0, -45.0),
    "l_hip": (0.0, 0.0, 20.0),
    "r_hip": (0.0, 0.0, -20.0),
}

_A_POSE_DEG = {
    "l_shoulder": (0.0, 0.0, -45.0),
    "r_shoulder": (0.0, 0.0, 45.0),
}


def _named_pose(body: SkinnedBody, degrees: dict[str, tuple[float, float, float]]) -> PoseParams:
    rotations = np.zeros((body.joint_count, 3))
    for name, rot in degrees.items():
        j = body.joint_index(name)
        if j is not None:
            rotations[j] = np.radians(rot)
    return PoseParams(np.zeros(3), rotations)


def canonical_pose(
    body: SkinnedBody,
    preset: str = "X",
    training_poses: list[PoseParams] | None = None,
) -> PoseParams:
    if preset == "T":
        return PoseParams.zeros(body.joint_count)
    if preset == "X":
        return _named_pose(body, _X_POSE_DEG)
    if preset == "A":
        if not training_poses:
            return _named_pose(body, _A_POSE_DEG)
        rotations = np.mean([p.joint_rotations for p in training_poses], axis=0)
        root = int(np.flatnonzero(body.parents < 0)[0])
        rotations[root] = 0.0
        return PoseParams.create(np.zeros(3), rotations)
    raise ValueError(f"unknown canonical preset {preset!r}")


def resolve_canonical_pose(body: SkinnedBody, config: DeformationConfig) -> PoseParams:
    if config.canonical_pose is not None:
        return config.canonical_pose
    return canonical_pose(body, config.canonical_preset)


# --- Spatial index ---


@dataclass(frozen=True)
class NeighborWeights:
    indices: np.ndarray
    weights: np.ndarray
    distances: np.ndarray


class SpatialIndex:
    """Exact k-nearest-neighbour queries over posed vertices, ties by ascending index."""

    def __init__(self, vertices: np.ndarray) -> None:
        vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        if vertices.shape[0] == 0:
            raise ValueError("cannot build a spatial index over zero vertices")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("posed vertices contain non-finite values")
        vertices.setflags(write=False)
        self._vertices = vertices
        self._tree = cKDTree(vertices)

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def size(self) -> int:
        return self._vertices.shape[0]

    def query(self, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        k = min(k, self.size)
        fetch = min(self.size, k + _TIE_SLACK)
        dist, idx = self._tree.query(points, k=fetch)
        dist = dist.reshape(points.shape[0], fetch)
        idx = idx.reshape(points.shape[0], fetch)

        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)

        if fetch < self.size:
            # A tie that reaches the last fetched slot may hide lower indices.
            overflow = np.flatnonzero(dist[:, k - 1] >= dist[:, -1])
            for row in overflow:
                radius = dist[row, k - 1]
                candidates = np.array(self._tree.query_ball_point(points[row], radius * (1.0 + 1e-12) + 1e-300))
                cand_dist = np.linalg.norm(self._vertices[candidates] - points[row], axis=1)
                cand_order = np.lexsort((candidates, cand_dist))[:fetch]
                idx[row, : cand_order.size] = candidates[cand_order]
                dist[row, : cand_order.size] = cand_dist[cand_order]

        return dist[:, :k], idx[:, :k]


def build_index(posed_vertices: np.ndarray) -> SpatialIndex:
    return SpatialIndex(posed_vertices)


def _as_points(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    points = x.reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    return points, single


def neighbor_weights(
    x: np.ndarray, index: SpatialIndex, body: SkinnedBody, config: DeformationConfig
) -> NeighborWeights:
    points, single = _as_points(x)
    result = _neighbor_weights(points, index, body.blend_weights, config)
    if single:
        return NeighborWeights(result.indices[0], result.weights[0], result.distances[0])
    return result


def _neighbor_weights(
    points: np.ndarray, index: SpatialIndex, blend_weights: np.ndarray, config: DeformationConfig
) -> NeighborWeights:
    distances, indices = index.query(points, config.k_neighbors)
    b_hat = blend_weights[indices[:, :1]]  # nearest vertex
    weight_gap = np.linalg.norm(blend_weights[indices] - b_hat, axis=-1)
    omega = np.exp(-distances * weight_gap / (2.0 * config.bandwidth**2))
    weights = omega / omega.sum(axis=1, keepdims=True)
    return NeighborWeights(indices=indices, weights=weights, distances=distances)


def weighted_distance(
    x: np.ndarray, index: SpatialIndex, body: SkinnedBody, config: DeformationConfig
) -> np.ndarray | float:
    points, single = _as_points(x)
    nb = _neighbor_weights(points, index, body.blend_weights, config)
    d = np.sum(nb.weights * nb.distances, axis=1)
    return float(d[0]) if single else d


def mask_indicator(
    x: np.ndarray, index: SpatialIndex, body: SkinnedBody, config: DeformationConfig
) -> np.ndarray | int:
    d = weighted_distance(x, index, body, config)
    if isinstance(d, float):
        return int(d <= config.mask_threshold)
    return (d <= config.mask_threshold).astype(np.int8)


# --- Warp ---


def _invert_affine(transforms: np.ndarray) -> np.ndarray:
    rot = transforms[..., :3, :3]
    if np.any(np.abs(np.linalg.det(rot)) < 1e-12):
        raise np.linalg.LinAlgError("vertex transform is singular")
    rot_inv = np.linalg.inv(rot)
    out = np.zeros_like(transforms)
    out[..., :3, :3] = rot_inv
    out[..., :3, 3] = -np.einsum("...ab,...b->...a", rot_inv, transforms[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def relative_transforms(
    body: SkinnedBody, shape: ShapeParams, pose: PoseParams, canonical: PoseParams
) -> np.ndarray:
    """Per-vertex ``M_i(canonical) M_i(pose)^-1``, shape ``(V, 4, 4)``."""
    posed = vertex_transforms(body, shape, pose).transforms
    rest = vertex_transforms(body, shape, canonical).transforms
    return rest @ _invert_affine(posed)


def warp_points(points: np.ndarray, neighbors: NeighborWeights, relative: np.ndarray) -> np.ndarray:
    """Apply the blended relative transform of each point's neighbours."""
    blended = np.einsum("nk,nkab->nab", neighbors.weights, relative[neighbors.indices])
    return np.einsum("nab,nb->na", blended[:, :3, :3], points) + blended[:, :3, 3]


class PoseWarp:
    """Warp state for one frame: posed index, per-vertex transforms, canonical target.

    Built once per (frame, pose iterate); immutable afterwards.
    """

    def __init__(
        self,
        body: SkinnedBody,
        pose: PoseParams,
        shape: ShapeParams,
        config: DeformationConfig,
        canonical: PoseParams | None = None,
    ) -> None:
        self.body = body
        self.pose = pose
        self.shape = shape
        self.config = config
        self.canonical = canonical if canonical is not None else resolve_canonical_pose(body, config)

        observed = vertex_transforms(body, shape, pose)
        rest = vertex_transforms(body, shape, self.canonical)
        self.posed_vertices = observed.posed_vertices
        self.index = SpatialIndex(observed.posed_vertices)
        self._posed_transforms = observed.transforms
        self._posed_inverse = _invert_affine(observed.transforms)
        self.relative = rest.transforms @ self._posed_inverse

    def neighbors(self, points: np.ndarray) -> NeighborWeights:
        return _neighbor_weights(np.asarray(points, dtype=np.float64).reshape(-1, 3), self.index, self.body.blend_weights, self.config)

    def weighted_distance(self, points: np.ndarray, neighbors: NeighborWeights | None = None) -> np.ndarray:
        nb = neighbors if neighbors is not None else self.neighbors(points)
        return np.sum(nb.weights * nb.distances, axis=1)

    def mask(self, points: np.ndarray, neighbors: NeighborWeights | None = None) -> np.ndarray:
        return self.weighted_distance(points, neighbors) <= self.config.mask_threshold

    def warp(self, points: np.ndarray, neighbors: NeighborWeights | None = None) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        nb = neighbors if neighbors is not None else self.neighbors(points)
        return warp_points(points, nb, self.relative)

    def _local_coordinates(self, points: np.ndarray, neighbors: NeighborWeights) -> np.ndarray:
        """Homogeneous ``M_i(pose)^-1 x`` per (point, neighbour) pair, ``(N, k, 4)``."""
        inv = self._posed_inverse[neighbors.indices]
        local = np.ones(neighbors.indices.shape + (4,))
        local[..., :3] = np.einsum("nkab,nb->nka", inv[..., :3, :3], points) + inv[..., :3, 3]
        return local

    def _offset_jacobian(self) -> np.ndarray | None:
        """``d(B_S + B_P)/d pose`` per vertex, ``(V, 3, P)``; None without a pose basis."""
        if not self.body.pose_basis.shape[0]:
            return None
        d_features = pose_features_jacobian(self.body, self.pose)  # (C, P)
        return np.einsum("cvd,cp->vdp", self.body.pose_basis, d_features)

    def pose_jacobian(self, points: np.ndarray, neighbors: NeighborWeights | None = None) -> np.ndarray:
        """``d warp / d pose`` per point, ``(N, 3, P)``, frozen neighbour weights."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        nb = neighbors if neighbors is not None else self.neighbors(points)
        body = self.body
        d_joint = skinning_transforms_jacobian(body, self.pose)  # (K, P, 4, 4)
        offsets = blendshape_offsets(body, self.shape, self.pose)
        d_offsets = self._offset_jacobian()
        local = self._local_coordinates(points, nb)

        jac = np.zeros((points.shape[0], 3, body.pose_param_count))
        for slot in range(nb.indices.shape[1]):
            i = nb.indices[:, slot]
            shifted = local[:, slot].copy()
            shifted[:, :3] += offsets[i]
            # (sum_j b_ij dG_j) T(o_i) y
            d_point = np.einsum("nk,kpab,nb->npa", body.blend_weights[i], d_joint, shifted)[..., :3]
            if d_offsets is not None:
                blended_rot = self._posed_transforms[i, :3, :3]
                d_point = d_point + np.einsum("nab,nbp->npa", blended_rot, d_offsets[i])
            rel = self.relative[i, :3, :3]
            jac -= nb.weights[:, slot, None, None] * np.einsum("nab,npb->nap", rel, d_point)
        return jac

    def pose_vjp(
        self, points: np.ndarray, neighbors: NeighborWeights, grad_canonical: np.ndarray
    ) -> np.ndarray:
        """Pose gradient ``sum_n g_n^T d warp(x_n) / d pose`` without forming the Jacobian."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        grad_canonical = np.asarray(grad_canonical, dtype=np.float64).reshape(-1, 3)
        body = self.body
        v = body.vertex_count
        local = self._local_coordinates(points, neighbors)  # (N, k, 4)

        # u = -w Rel_i^T g, outer product with the local coordinate y.
        rel_rot = self.relative[neighbors.indices, :3, :3]  # (N, k, 3, 3)
        u = -neighbors.weights[..., None] * np.einsum("nkba,nb->nka", rel_rot, grad_canonical)
        outer = np.zeros(neighbors.indices.shape + (4, 4))
        outer[..., :3, :] = u[..., :, None] * local[..., None, :]

        flat_idx = neighbors.indices.reshape(-1)
        flat_outer = outer.reshape(-1, 16)
        per_vertex = np.stack(
            [np.bincount(flat_idx, weights=flat_outer[:, c], minlength=v) for c in range(16)],
            axis=1,
        ).reshape(v, 4, 4)

        offsets = blendshape_offsets(body, self.shape, self.pose)
        shift = np.tile(np.eye(4), (v, 1, 1))
        shift[:, :3, 3] = offsets
        per_joint = np.einsum("vk,vab->kab", body.blend_weights, per_vertex @ np.transpose(shift, (0, 2, 1)))
        d_joint = skinning_transforms_jacobian(body, self.pose)
        grad = np.einsum("kab,kpab->p", per_joint, d_joint)

        d_offsets = self._offset_jacobian()
        if d_offsets is not None:
            q = np.einsum("vba,vb->va", self._posed_transforms[:, :3, :3], per_vertex[:, :3, 3])
            grad = grad + np.einsum("vd,vdp->p", q, d_offsets)
        return grad


def warp_to_canonical(
    x: np.ndarray,
    pose_t: PoseParams,
    shape: ShapeParams,
    body: SkinnedBody,
    index: SpatialIndex,
    config: DeformationConfig,
) -> np.ndarray:
    points, single = _as_points(x)
    relative = relative_transforms(body, shape, pose_t, resolve_canonical_pose(body, config))
    nb = _neighbor_weights(points, index, body.blend_weights, config)
    out = warp_points(points, nb, relative)
    return out[0] if single else out


def warp_pose_jacobian(
    x: np.ndarray,
    pose_t: PoseParams,
    shape: ShapeParams,
    body: SkinnedBody,
    index: SpatialIndex,
    config: DeformationConfig,
) -> np.ndarray:
    points, single = _as_points(x)
    warp = PoseWarp(body, pose_t, shape, config)
    nb = _neighbor_weights(points, index, body.blend_weights, config)
    jac = warp.pose_jacobian(points, nb)
    return jac[0] if single else jac
