"""Parametric skinned body: kinematics, linear blend skinning, body files, toy bodies.

Coordinates are meters, +y up. Pose vectors are laid out as
``[root_translation(3), joint_rotations(3K)]``.

Body file layout (text, one record per line, whitespace separated)::

    ANERF-BODY 1
    counts <V> <K> <S> <C> <F>
    [joints]          K lines: name parent x y z      (parent -1 for the root)
    [vertices]        V lines: x y z
    [weights]         V lines: K blend weights
    [shape_basis]     S*V lines: dx dy dz             (basis-major)
    [pose_basis]      C*V lines: dx dy dz             (C is 0 or 9*(K-1))
    [faces]           F lines: a b c
    [end]

Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from animatable_nerf.types import ToyBodySpec

logger = logging.getLogger(__name__)

BODY_MAGIC = "ANERF-BODY"
BODY_VERSION = 1

WEIGHT_TOLERANCE = 1e-6
MAX_ROTATION_ANGLE = np.pi + 1e-3

# Series branch for the rotation derivative coefficients.
_SMALL_ANGLE = 1e-3


class BodyValidationError(ValueError):
    pass


class BodyFileError(ValueError):
    pass


def _readonly(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SkinnedBody:
    rest_vertices: np.ndarray
    parents: np.ndarray
    joint_rest_positions: np.ndarray
    blend_weights: np.ndarray
    shape_basis: np.ndarray
    pose_basis: np.ndarray
    faces: np.ndarray
    joint_names: tuple[str, ...] = ()
    kinematic_order: tuple[int, ...] = field(init=False, default=())

    def __post_init__(self) -> None:
        rest = _readonly(self.rest_vertices).reshape(-1, 3)
        parents = _readonly(self.parents, np.int64).reshape(-1)
        joints = _readonly(self.joint_rest_positions).reshape(-1, 3)
        v, k = rest.shape[0], joints.shape[0]
        weights = _readonly(self.blend_weights).reshape(v, -1) if v else _readonly(np.zeros((0, k)))
        shape_basis = _readonly(self.shape_basis).reshape(-1, v, 3) if v else _readonly(np.zeros((0, 0, 3)))
        pose_basis = _readonly(self.pose_basis).reshape(-1, v, 3) if v else _readonly(np.zeros((0, 0, 3)))
        faces = _readonly(self.faces, np.int64).reshape(-1, 3)
        names = tuple(self.joint_names) or tuple(f"joint_{j}" for j in range(k))

        object.__setattr__(self, "rest_vertices", rest)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "joint_rest_positions", joints)
        object.__setattr__(self, "blend_weights", weights)
        object.__setattr__(self, "shape_basis", shape_basis)
        object.__setattr__(self, "pose_basis", pose_basis)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "kinematic_order", _validate_body(self))

    @property
    def vertex_count(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_rest_positions.shape[0]

    @property
    def shape_count(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def pose_param_count(self) -> int:
        return 3 + 3 * self.joint_count

    def joint_index(self, name: str) -> int | None:
        try:
            return self.joint_names.index(name)
        except ValueError:
            return None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkinnedBody):
            return NotImplemented
        return self.joint_names == other.joint_names and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in (
                "rest_vertices",
                "parents",
                "joint_rest_positions",
                "blend_weights",
                "shape_basis",
                "pose_basis",
                "faces",
            )
        )

    __hash__ = None  # type: ignore[assignment]


def _validate_body(body: SkinnedBody) -> tuple[int, ...]:
    v, k = body.vertex_count, body.joint_count
    if v < 1:
        raise BodyValidationError("body has no vertices")
    if k < 1:
        raise BodyValidationError("body has no joints")
    if body.parents.shape[0] != k:
        raise BodyValidationError(f"parents has {body.parents.shape[0]} entries, expected {k}")
    if len(body.joint_names) != k:
        raise BodyValidationError(f"joint_names has {len(body.joint_names)} entries, expected {k}")
    if body.blend_weights.shape != (v, k):
        raise BodyValidationError(
            f"blend_weights has shape {body.blend_weights.shape}, expected {(v, k)}"
        )
    for name in ("rest_vertices", "joint_rest_positions", "blend_weights", "shape_basis", "pose_basis"):
        if not np.all(np.isfinite(getattr(body, name))):
            raise BodyValidationError(f"{name} contains non-finite values")

    if np.any(body.blend_weights < 0.0):
        row = int(np.argwhere(body.blend_weights < 0.0)[0, 0])
        raise BodyValidationError(f"blend weights of vertex {row} are negative")
    sums = body.blend_weights.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > WEIGHT_TOLERANCE)
    if bad.size:
        raise BodyValidationError(
            f"blend weights of vertex {int(bad[0])} sum to {sums[bad[0]]:.6g}, expected 1"
        )

    if body.shape_basis.shape[1:] != (v, 3):
        raise BodyValidationError("shape_basis rows must match the vertex count")
    if body.pose_basis.shape[1:] != (v, 3):
        raise BodyValidationError("pose_basis rows must match the vertex count")
    if body.pose_basis.shape[0] not in (0, 9 * (k - 1)):
        raise BodyValidationError(
            f"pose_basis has {body.pose_basis.shape[0]} coefficients, expected 0 or {9 * (k - 1)}"
        )
    if body.faces.size and (body.faces.min() < 0 or body.faces.max() >= v):
        raise BodyValidationError("face indices out of range")

    return _kinematic_order(body.parents)


def _kinematic_order(parents: np.ndarray) -> tuple[int, ...]:
    k = parents.shape[0]
    roots = np.flatnonzero(parents < 0)
    if roots.size != 1:
        raise BodyValidationError(f"joint hierarchy needs exactly one root, found {roots.size}")
    if np.any(parents >= k):
        raise BodyValidationError("parent index out of range")

    children: dict[int, list[int]] = {j: [] for j in range(k)}
    for j, p in enumerate(parents):
        if p >= 0:
            children[int(p)].append(j)

    order: list[int] = []
    stack = [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != k:
        raise BodyValidationError("joint hierarchy contains a cycle or disconnected joints")
    return tuple(order)


@dataclass(frozen=True, eq=False)
class PoseParams:
    root_translation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self) -> None:
        translation = _readonly(self.root_translation).reshape(3)
        rotations = _readonly(self.joint_rotations).reshape(-1, 3)
        if not (np.all(np.isfinite(translation)) and np.all(np.isfinite(rotations))):
            raise ValueError("pose contains non-finite values")
        angles = np.linalg.norm(rotations, axis=1)
        if np.any(angles >= MAX_ROTATION_ANGLE):
            j = int(np.argmax(angles))
            raise ValueError(f"joint {j} rotation magnitude {angles[j]:.6g} exceeds pi")
        object.__setattr__(self, "root_translation", translation)
        object.__setattr__(self, "joint_rotations", rotations)

    @property
    def joint_count(self) -> int:
        return self.joint_rotations.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.root_translation, self.joint_rotations.reshape(-1)])

    @classmethod
    def from_vector(cls, vector: np.ndarray, joint_count: int) -> PoseParams:
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.shape[0] != 3 + 3 * joint_count:
            raise ValueError(
                f"pose vector has {vector.shape[0]} entries, expected {3 + 3 * joint_count}"
            )
        return cls.create(vector[:3], vector[3:].reshape(joint_count, 3))

    @classmethod
    def create(cls, root_translation, joint_rotations) -> PoseParams:
        return cls(
            root_translation=np.asarray(root_translation, dtype=np.float64),
            joint_rotations=wrap_axis_angle(np.asarray(joint_rotations, dtype=np.float64)),
        )

    @classmethod
    def zeros(cls, joint_count: int) -> PoseParams:
        return cls(np.zeros(3), np.zeros((joint_count, 3)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoseParams):
            return NotImplemented
        return np.array_equal(self.root_translation, other.root_translation) and np.array_equal(
            self.joint_rotations, other.joint_rotations
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ShapeParams:
    coefficients: np.ndarray

    def __post_init__(self) -> None:
        coefficients = _readonly(self.coefficients).reshape(-1)
        if not np.all(np.isfinite(coefficients)):
            raise ValueError("shape contains non-finite values")
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, count: int) -> ShapeParams:
        return cls(np.zeros(count))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ShapeParams):
            return NotImplemented
        return np.array_equal(self.coefficients, other.coefficients)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class VertexTransforms:
    transforms: np.ndarray
    posed_vertices: np.ndarray


# --- Rotations ---


def wrap_axis_angle(rotvecs: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the equivalent rotation with angle in [0, pi]."""
    rotvecs = np.array(rotvecs, dtype=np.float64)
    angles = np.linalg.norm(rotvecs, axis=-1, keepdims=True)
    over = angles > np.pi
    if not np.any(over):
        return rotvecs
    wrapped = np.mod(angles, 2.0 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    scale = np.divide(wrapped, angles, out=np.ones_like(angles), where=over)
    return np.where(over, rotvecs * scale, rotvecs)


def axis_angle_to_matrix(rotvecs: np.ndarray) -> np.ndarray:
    rotvecs = np.array(rotvecs, dtype=np.float64)
    flat = rotvecs.reshape(-1, 3)
    matrices = Rotation.from_rotvec(flat).as_matrix()
    return matrices.reshape(rotvecs.shape[:-1] + (3, 3))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def axis_angle_jacobian(rotvecs: np.ndarray) -> np.ndarray:
    """Derivative of the rotation matrix w.r.t. each axis-angle component.

    Returns ``(..., 3, 3, 3)`` where ``out[..., k, :, :] = dR/dr_k``. With
    ``R = I + a[r] + b[r]^2`` the derivative is
    ``a E_k + b (E_k[r] + [r]E_k) + r_k (c [r] + d [r]^2)``.
    """
    r = np.asarray(rotvecs, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1)
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)

    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    half = np.sin(0.5 * safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half / (safe * safe))
    c = np.where(
        small,
        -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
        (safe * np.cos(safe) - np.sin(safe)) / safe**3,
    )
    d = np.where(
        small,
        -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        (safe * np.sin(safe) - 2.0 * (1.0 - np.cos(safe))) / safe**4,
    )

    k_mat = skew(r)
    k_sq = k_mat @ k_mat
    basis = skew(np.eye(3))  # E_k for k = 0, 1, 2

    out = np.empty(r.shape[:-1] + (3, 3, 3))
    for k in range(3):
        e_k = basis[k]
        out[..., k, :, :] = (
            a[..., None, None] * e_k
            + b[..., None, None] * (e_k @ k_mat + k_mat @ e_k)
            + r[..., k, None, None] * (c[..., None, None] * k_mat + d[..., None, None] * k_sq)
        )
    return out


def rotation_angle_error(rotvecs_a: np.ndarray, rotvecs_b: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) between paired axis-angle rotations."""
    ra = Rotation.from_rotvec(np.array(rotvecs_a, dtype=np.float64).reshape(-1, 3))
    rb = Rotation.from_rotvec(np.array(rotvecs_b, dtype=np.float64).reshape(-1, 3))
    return (ra.inv() * rb).magnitude()


# --- Kinematics and skinning ---


def _check_pose(body: SkinnedBody, pose: PoseParams) -> None:
    if pose.joint_count != body.joint_count:
        raise ValueError(
            f"pose has {pose.joint_count} joints, body has {body.joint_count}"
        )


def _check_shape(body: SkinnedBody, shape: ShapeParams) -> None:
    if shape.coefficients.shape[0] != body.shape_count:
        raise ValueError(
            f"shape has {shape.coefficients.shape[0]} coefficients, body has {body.shape_count}"
        )


def _local_transforms(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    k = body.joint_count
    local = np.zeros((k, 4, 4))
    local[:, :3, :3] = axis_angle_to_matrix(pose.joint_rotations)
    local[:, 3, 3] = 1.0
    for j in range(k):
        p = body.parents[j]
        if p < 0:
            local[j, :3, 3] = body.joint_rest_positions[j] + pose.root_translation
        else:
            local[j, :3, 3] = body.joint_rest_positions[j] - body.joint_rest_positions[p]
    return local


def forward_kinematics(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """World transforms ``(K, 4, 4)`` of every joint frame."""
    _check_pose(body, pose)
    local = _local_transforms(body, pose)
    world = np.empty_like(local)
    for j in body.kinematic_order:
        p = body.parents[j]
        world[j] = local[j] if p < 0 else world[p] @ local[j]
    return world


def skinning_transforms(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Per-joint rest-to-posed transforms ``G_j`` (world transform times translate(-J_j))."""
    world = forward_kinematics(body, pose)
    return _relative_to_rest(body, world)


def _relative_to_rest(body: SkinnedBody, world: np.ndarray) -> np.ndarray:
    out = world.copy()
    out[..., :3, 3] -= np.einsum("...ab,...b->...a", world[..., :3, :3], body.joint_rest_positions)
    return out


def skinning_transforms_jacobian(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Derivative ``(K, P, 4, 4)`` of the skinning transforms w.r.t. the pose vector."""
    _check_pose(body, pose)
    k = body.joint_count
    n_params = body.pose_param_count
    local = _local_transforms(body, pose)
    d_rot = axis_angle_jacobian(pose.joint_rotations)  # (K, 3, 3, 3)

    world = np.empty_like(local)
    d_world = np.zeros((k, n_params, 4, 4))
    for j in body.kinematic_order:
        p = body.parents[j]
        cols = slice(3 + 3 * j, 6 + 3 * j)
        d_local = np.zeros((3, 4, 4))
        d_local[:, :3, :3] = d_rot[j]
        if p < 0:
            world[j] = local[j]
            d_world[j, cols] = d_local
            for axis in range(3):
                d_world[j, axis, axis, 3] = 1.0
        else:
            world[j] = world[p] @ local[j]
            d_world[j] = d_world[p] @ local[j]
            d_world[j, cols] += world[p] @ d_local

    d_world[..., :3, 3] -= np.einsum(
        "kpab,kb->kpa", d_world[..., :3, :3], body.joint_rest_positions
    )
    return d_world


def pose_features(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Pose-blendshape drivers: ``(R_j - I)`` flattened for every non-root joint."""
    rotations = axis_angle_to_matrix(pose.joint_rotations)
    non_root = np.flatnonzero(body.parents >= 0)
    return (rotations[non_root] - np.eye(3)).reshape(-1)


def pose_features_jacobian(body: SkinnedBody, pose: PoseParams) -> np.ndarray:
    """Derivative ``(9(K-1), P)`` of :func:`pose_features` w.r.t. the pose vector."""
    non_root = np.flatnonzero(body.parents >= 0)
    d_rot = axis_angle_jacobian(pose.joint_rotations)  # (K, 3, 3, 3)
    out = np.zeros((9 * non_root.size, body.pose_param_count))
    for row, j in enumerate(non_root):
        # d_rot[j, k] is dR_j/dr_jk, flattened row-major like pose_features.
        out[9 * row : 9 * row + 9, 3 + 3 * j : 6 + 3 * j] = d_rot[j].reshape(3, 9).T
    return out


def blendshape_offsets(body: SkinnedBody, shape: ShapeParams, pose: PoseParams) -> np.ndarray:
    """``B_S(beta) + B_P(theta)`` per vertex, ``(V, 3)``."""
    offsets = np.einsum("s,svc->vc", shape.coefficients, body.shape_basis)
    if body.pose_basis.shape[0]:
        offsets = offsets + np.einsum("c,cvd->vd", pose_features(body, pose), body.pose_basis)
    return offsets


def blended_transforms(body: SkinnedBody, joint_transforms: np.ndarray) -> np.ndarray:
    return np.einsum("vk,kab->vab", body.blend_weights, joint_transforms)


def vertex_transforms(body: SkinnedBody, shape: ShapeParams, pose: PoseParams) -> VertexTransforms:
    _check_pose(body, pose)
    _check_shape(body, shape)
    blended = blended_transforms(body, skinning_transforms(body, pose))
    offsets = blendshape_offsets(body, shape, pose)

    transforms = blended.copy()
    transforms[:, :3, 3] += np.einsum("vab,vb->va", blended[:, :3, :3], offsets)
    posed = (
        np.einsum("vab,vb->va", transforms[:, :3, :3], body.rest_vertices) + transforms[:, :3, 3]
    )
    return VertexTransforms(transforms=transforms, posed_vertices=posed)


# --- Body files ---

_SECTIONS = ("joints", "vertices", "weights", "shape_basis", "pose_basis", "faces")


def save_body(body: SkinnedBody, path: str | Path) -> None:
    def row(values) -> str:
        return " ".join(repr(float(x)) for x in values)

    v, k, s, c, f = (
        body.vertex_count,
        body.joint_count,
        body.shape_count,
        body.pose_basis.shape[0],
        body.faces.shape[0],
    )
    lines = [f"{BODY_MAGIC} {BODY_VERSION}", f"counts {v} {k} {s} {c} {f}", "[joints]"]
    for j in range(k):
        lines.append(f"{body.joint_names[j]} {int(body.parents[j])} {row(body.joint_rest_positions[j])}")
    lines.append("[vertices]")
    lines.extend(row(p) for p in body.rest_vertices)
    lines.append("[weights]")
    lines.extend(row(w) for w in body.blend_weights)
    lines.append("[shape_basis]")
    lines.extend(row(d) for d in body.shape_basis.reshape(-1, 3))
    lines.append("[pose_basis]")
    lines.extend(row(d) for d in body.pose_basis.reshape(-1, 3))
    lines.append("[faces]")
    lines.extend(" ".join(str(int(i)) for i in face) for face in body.faces)
    lines.append("[end]")

    Path(path).write_text("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, text: str, source: str) -> None:
        self._lines = text.splitlines()
        self._pos = 0
        self._source = source

    def error(self, message: str) -> BodyFileError:
        return BodyFileError(f"{self._source}:{self._pos}: {message}")

    def next(self, what: str) -> list[str]:
        while self._pos < len(self._lines):
            line = self._lines[self._pos].strip()
            self._pos += 1
            if line and not line.startswith("#"):
                return line.split()
        raise BodyFileError(f"{self._source}: unexpected end of file while reading {what}")

    def expect_section(self, name: str) -> None:
        tokens = self.next(f"section [{name}]")
        if tokens != [f"[{name}]"]:
            raise self.error(f"expected section [{name}], found {' '.join(tokens)!r}")

    def floats(self, what: str, count: int) -> list[float]:
        tokens = self.next(what)
        if len(tokens) != count:
            raise self.error(f"field {what!r}: expected {count} values, got {len(tokens)}")
        try:
            return [float(t) for t in tokens]
        except ValueError as e:
            raise self.error(f"field {what!r}: {e}") from None

    def ints(self, what: str, count: int) -> list[int]:
        tokens = self.next(what)
        if len(tokens) != count:
            raise self.error(f"field {what!r}: expected {count} values, got {len(tokens)}")
        try:
            return [int(t) for t in tokens]
        except ValueError as e:
            raise self.error(f"field {what!r}: {e}") from None


def load_body(path: str | Path) -> SkinnedBody:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise BodyFileError(f"cannot read body file {path}: {e}") from None
    return parse_body(text, source=str(path))


def parse_body(text: str, source: str = "<body>") -> SkinnedBody:
    reader = _LineReader(text, source)

    header = reader.next("header")
    if len(header) != 2 or header[0] != BODY_MAGIC:
        raise reader.error(f"not a body file (expected {BODY_MAGIC!r} header)")
    if header[1] != str(BODY_VERSION):
        raise reader.error(f"unsupported body file version {header[1]!r}")

    counts = reader.next("counts")
    if len(counts) != 6 or counts[0] != "counts":
        raise reader.error("expected 'counts V K S C F'")
    try:
        v, k, s, c, f = (int(x) for x in counts[1:])
    except ValueError:
        raise reader.error("counts must be integers") from None

    reader.expect_section("joints")
    names: list[str] = []
    parents: list[int] = []
    joints: list[list[float]] = []
    for _ in range(k):
        tokens = reader.next("joints")
        if len(tokens) != 5:
            raise reader.error(f"field 'joints': expected name parent x y z, got {len(tokens)} values")
        try:
            parents.append(int(tokens[1]))
            joints.append([float(t) for t in tokens[2:]])
        except ValueError as e:
            raise reader.error(f"field 'joints': {e}") from None
        names.append(tokens[0])

    reader.expect_section("vertices")
    vertices = [reader.floats("vertices", 3) for _ in range(v)]
    reader.expect_section("weights")
    weights = [reader.floats("weights", k) for _ in range(v)]
    reader.expect_section("shape_basis")
    shape_basis = [reader.floats("shape_basis", 3) for _ in range(s * v)]
    reader.expect_section("pose_basis")
    pose_basis = [reader.floats("pose_basis", 3) for _ in range(c * v)]
    reader.expect_section("faces")
    faces = [reader.ints("faces", 3) for _ in range(f)]
    reader.expect_section("end")

    try:
        return SkinnedBody(
            rest_vertices=np.array(vertices).reshape(v, 3),
            parents=np.array(parents, dtype=np.int64),
            joint_rest_positions=np.array(joints).reshape(k, 3),
            blend_weights=np.array(weights).reshape(v, k),
            shape_basis=np.array(shape_basis).reshape(s, v, 3),
            pose_basis=np.array(pose_basis).reshape(c, v, 3),
            faces=np.array(faces, dtype=np.int64).reshape(f, 3),
            joint_names=tuple(names),
        )
    except BodyValidationError as e:
        raise BodyValidationError(f"{source}: {e}") from None


# --- Procedural toy body ---

# Template skeleton in a T-pose: (name, parent name, rest position).
_TEMPLATE_JOINTS: tuple[tuple[str, str | None, tuple[float, float, float]], ...] = (
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("chest", "pelvis", (0.0, 0.25, 0.0)),
    ("l_shoulder", "chest", (0.18, 0.45, 0.0)),
    ("r_shoulder", "chest", (-0.18, 0.45, 0.0)),
    ("l_hip", "pelvis", (0.1, -0.05, 0.0)),
    ("r_hip", "pelvis", (-0.1, -0.05, 0.0)),
    ("l_elbow", "l_shoulder", (0.45, 0.45, 0.0)),
    ("r_elbow", "r_shoulder", (-0.45, 0.45, 0.0)),
    ("l_knee", "l_hip", (0.1, -0.45, 0.0)),
    ("r_knee", "r_hip", (-0.1, -0.45, 0.0)),
    ("head", "chest", (0.0, 0.55, 0.0)),
    ("l_wrist", "l_elbow", (0.7, 0.45, 0.0)),
    ("r_wrist", "r_elbow", (-0.7, 0.45, 0.0)),
    ("l_ankle", "l_knee", (0.1, -0.85, 0.0)),
    ("r_ankle", "r_knee", (-0.1, -0.85, 0.0)),
)


@dataclass(frozen=True)
class _Segment:
    owner: str
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: str
    radius_scale: float = 1.0
    blend_parent: bool = True
    child: str | None = None


_TEMPLATE_SEGMENTS: tuple[_Segment, ...] = (
    _Segment("pelvis", (0.0, -0.08, 0.0), (0.0, 0.25, 0.0), "torso", blend_parent=False, child="chest"),
    _Segment("chest", (0.0, 0.25, 0.0), (0.0, 0.5, 0.0), "torso"),
    _Segment("head", (0.0, 0.58, 0.0), (0.0, 0.74, 0.0), "head", blend_parent=False),
    _Segment("l_shoulder", (0.18, 0.45, 0.0), (0.45, 0.45, 0.0), "arm", child="l_elbow"),
    _Segment("r_shoulder", (-0.18, 0.45, 0.0), (-0.45, 0.45, 0.0), "arm", child="r_elbow"),
    _Segment("l_elbow", (0.45, 0.45, 0.0), (0.7, 0.45, 0.0), "arm", 0.9, child="l_wrist"),
    _Segment("r_elbow", (-0.45, 0.45, 0.0), (-0.7, 0.45, 0.0), "arm", 0.9, child="r_wrist"),
    _Segment("l_wrist", (0.7, 0.45, 0.0), (0.8, 0.45, 0.0), "arm", 0.8),
    _Segment("r_wrist", (-0.7, 0.45, 0.0), (-0.8, 0.45, 0.0), "arm", 0.8),
    _Segment("l_hip", (0.1, -0.05, 0.0), (0.1, -0.45, 0.0), "leg", child="l_knee"),
    _Segment("r_hip", (-0.1, -0.05, 0.0), (-0.1, -0.45, 0.0), "leg", child="r_knee"),
    _Segment("l_knee", (0.1, -0.45, 0.0), (0.1, -0.85, 0.0), "leg", 0.85, child="l_ankle"),
    _Segment("r_knee", (-0.1, -0.45, 0.0), (-0.1, -0.85, 0.0), "leg", 0.85, child="r_ankle"),
    _Segment("l_ankle", (0.1, -0.87, 0.02), (0.1, -0.87, 0.16), "leg", 0.7),
    _Segment("r_ankle", (-0.1, -0.87, 0.02), (-0.1, -0.87, 0.16), "leg", 0.7),
)

MAX_TOY_JOINTS = len(_TEMPLATE_JOINTS)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ring_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, axis)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return u, w


def make_toy_body(spec: ToyBodySpec | None = None, seed: int = 0) -> SkinnedBody:
    """Capsule-limb humanoid in a T-pose.

    The first ``joint_count`` template joints are kept (pelvis, chest, shoulders,
    hips, elbows, knees, then head, wrists, ankles). Segments whose joint is
    dropped are rigidly attached to the nearest kept ancestor.
    """
    spec = spec or ToyBodySpec()
    k = spec.joint_count
    if k < 2:
        raise ValueError(f"toy body needs at least 2 joints, got {k}")
    if k > MAX_TOY_JOINTS:
        raise ValueError(f"toy body supports at most {MAX_TOY_JOINTS} joints, got {k}")
    if spec.rings_per_segment < 2 or spec.ring_resolution < 3:
        raise ValueError("toy body needs at least 2 rings of 3 vertices per segment")
    if not 0.0 < spec.blend_zone <= 0.5:
        raise ValueError(f"blend_zone must be in (0, 0.5], got {spec.blend_zone}")

    rng = np.random.default_rng(seed)
    template = {name: (parent, pos) for name, parent, pos in _TEMPLATE_JOINTS}
    kept = [name for name, _, _ in _TEMPLATE_JOINTS[:k]]
    index = {name: j for j, name in enumerate(kept)}

    def resolve(name: str) -> int:
        while name not in index:
            parent = template[name][0]
            assert parent is not None
            name = parent
        return index[name]

    parents = np.array([index[template[n][0]] if template[n][0] else -1 for n in kept], dtype=np.int64)
    joints = np.array([template[n][1] for n in kept]) * spec.scale
    radii = {
        "torso": spec.torso_radius,
        "head": spec.head_radius,
        "arm": spec.arm_radius,
        "leg": spec.leg_radius,
    }

    vertices: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    radial: list[np.ndarray] = []
    segment_ids: list[np.ndarray] = []
    faces: list[np.ndarray] = []
    n_rings, n_around = spec.rings_per_segment, spec.ring_resolution

    for seg_id, seg in enumerate(_TEMPLATE_SEGMENTS):
        owner = resolve(seg.owner)
        owner_kept = seg.owner in index
        parent = int(parents[owner]) if owner_kept and seg.blend_parent and parents[owner] >= 0 else -1
        child = index.get(seg.child) if (owner_kept and seg.child) else None

        start = np.array(seg.start) * spec.scale
        end = np.array(seg.end) * spec.scale
        axis = end - start
        length = np.linalg.norm(axis)
        axis /= length
        u, w = _ring_frame(axis)
        radius = radii[seg.radius] * seg.radius_scale * spec.scale

        t = np.linspace(0.0, 1.0, n_rings)
        phi = 2.0 * np.pi * np.arange(n_around) / n_around
        dirs = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w  # (A, 3)
        ring_pts = start + (t * length)[:, None, None] * axis + radius * dirs[None]
        seg_vertices = np.concatenate(
            [ring_pts.reshape(-1, 3), [start - radius * axis], [end + radius * axis]]
        )
        seg_radial = np.concatenate(
            [np.broadcast_to(dirs, (n_rings, n_around, 3)).reshape(-1, 3), [-axis], [axis]]
        )
        seg_t = np.concatenate([np.repeat(t, n_around), [0.0, 1.0]])

        seg_weights = np.zeros((seg_vertices.shape[0], k))
        w_owner = np.ones_like(seg_t)
        if parent >= 0:
            share = 0.5 + 0.5 * _smoothstep(seg_t / spec.blend_zone)
            seg_weights[:, parent] += 1.0 - share
            w_owner = share
        if child is not None:
            to_child = 0.5 * (1.0 - _smoothstep((1.0 - seg_t) / spec.blend_zone))
            seg_weights[:, child] += to_child
            w_owner = w_owner - to_child
        seg_weights[:, owner] += w_owner

        base = sum(len(x) for x in vertices)
        ring = lambda r, i: base + r * n_around + (i % n_around)  # noqa: E731
        start_pole, end_pole = base + n_rings * n_around, base + n_rings * n_around + 1
        tris = []
        for r in range(n_rings - 1):
            for i in range(n_around):
                tris.append((ring(r, i), ring(r, i + 1), ring(r + 1, i + 1)))
                tris.append((ring(r, i), ring(r + 1, i + 1), ring(r + 1, i)))
        for i in range(n_around):
            tris.append((start_pole, ring(0, i + 1), ring(0, i)))
            tris.append((end_pole, ring(n_rings - 1, i), ring(n_rings - 1, i + 1)))

        vertices.append(seg_vertices)
        weights.append(seg_weights)
        radial.append(seg_radial)
        segment_ids.append(np.full(seg_vertices.shape[0], seg_id))
        faces.append(np.array(tris, dtype=np.int64))

    rest = np.concatenate(vertices)
    if spec.surface_noise > 0.0:
        rest = rest + spec.surface_noise * rng.normal(size=rest.shape)
    blend = np.concatenate(weights)
    blend /= blend.sum(axis=1, keepdims=True)
    normals = np.concatenate(radial)
    seg_of_vertex = np.concatenate(segment_ids)

    # Shape basis: global inflation, then random per-segment thickness modes.
    shape_basis = np.zeros((spec.shape_count, rest.shape[0], 3))
    if spec.shape_count:
        shape_basis[0] = 0.02 * spec.scale * normals
    for s in range(1, spec.shape_count):
        per_segment = rng.normal(scale=0.01 * spec.scale, size=len(_TEMPLATE_SEGMENTS))
        shape_basis[s] = per_segment[seg_of_vertex, None] * normals

    body = SkinnedBody(
        rest_vertices=rest,
        parents=parents,
        joint_rest_positions=joints,
        blend_weights=blend,
        shape_basis=shape_basis,
        pose_basis=np.zeros((0, rest.shape[0], 3)),
        faces=np.concatenate(faces),
        joint_names=tuple(kept),
    )
    logger.debug("Toy body: %d joints, %d vertices, %d faces", k, body.vertex_count, body.faces.shape[0])
    return body
