"""Iso-surface extraction, similarity registration and mesh distances.

Distances are reported in centimetres for inputs in metres.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from skimage import measure

from animatable_nerf.deformation import PoseWarp
from animatable_nerf.renderer import Field

logger = logging.getLogger(__name__)

CM_PER_M = 100.0
# "known": the predicted mesh already lives in the GT frame.
ALIGNMENTS = ("known", "iterative")


@dataclass(frozen=True)
class MeshConfig:
    resolution: int = 128
    iso_level: float = 10.0
    padding: float = 0.05
    sample_count: int = 20000
    sample_seed: int = 0
    alignment: str = "known"

    def __post_init__(self) -> None:
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(f"alignment must be one of {', '.join(ALIGNMENTS)}, got {self.alignment!r}")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ValueError("mesh vertices contain non-finite values")
        if faces.size and (faces.min() < 0 or faces.max() >= vertices.shape[0]):
            raise ValueError("mesh face indices out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    @classmethod
    def empty(cls) -> Mesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)


@dataclass(frozen=True)
class GridSpec:
    resolution: tuple[int, int, int]
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    iso_level: float = 10.0

    def __post_init__(self) -> None:
        if any(r < 2 for r in self.resolution):
            raise ValueError(f"grid resolution must be >= 2 per axis, got {self.resolution}")
        if any(hi <= lo for lo, hi in zip(self.bounds_min, self.bounds_max)):
            raise ValueError("grid bounds are degenerate")

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.bounds_max) - np.array(self.bounds_min)) / (np.array(self.resolution) - 1)

    def points(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bounds_min, self.bounds_max, self.resolution)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


def grid_around(points: np.ndarray, resolution: int, padding: float, iso_level: float) -> GridSpec:
    lo = points.min(axis=0) - padding
    hi = points.max(axis=0) + padding
    return GridSpec(
        resolution=(resolution, resolution, resolution),
        bounds_min=tuple(float(v) for v in lo),
        bounds_max=tuple(float(v) for v in hi),
        iso_level=iso_level,
    )


def sample_density(field: Field, grid: GridSpec, mask: PoseWarp | None = None, chunk: int = 65536) -> np.ndarray:
    points = grid.points()
    density = np.zeros(points.shape[0])
    for start in range(0, points.shape[0], chunk):
        block = points[start : start + chunk]
        active = np.ones(block.shape[0], dtype=bool) if mask is None else mask.mask(block)
        if np.any(active):
            density[start : start + chunk][active] = field.evaluate(block[active]).density
    return density.reshape(grid.resolution)


def extract_mesh(field: Field, grid: GridSpec, mask: PoseWarp | None = None) -> Mesh:
    """Marching cubes over the gated density; an empty mesh when the level is never crossed."""
    volume = sample_density(field, grid, mask)
    if not volume.min() < grid.iso_level < volume.max():
        logger.info("No surface at iso level %.3g (density range %.3g..%.3g)", grid.iso_level, volume.min(), volume.max())
        return Mesh.empty()
    verts, faces, _, _ = measure.marching_cubes(volume, level=grid.iso_level, spacing=tuple(grid.spacing))
    verts = verts + np.array(grid.bounds_min)
    mesh = Mesh(verts, faces)
    logger.info("Extracted mesh: %d vertices, %d faces", verts.shape[0], faces.shape[0])
    return mesh


def save_obj(mesh: Mesh, path: str | Path) -> None:
    if mesh.is_empty:
        Path(path).write_text("# empty mesh\n")
        return
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(), include_normals=False, include_color=False, include_texture=False
    )
    Path(path).write_text(text)


def load_obj(path: str | Path) -> Mesh:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no mesh at {path}")
    if not any(line.startswith("f ") for line in path.read_text().splitlines()):
        return Mesh.empty()
    loaded = trimesh.load(path, file_type="obj", process=False, force="mesh")
    if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
        return Mesh.empty()
    return Mesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def is_watertight(mesh: Mesh) -> bool:
    return (not mesh.is_empty) and bool(mesh.to_trimesh().is_watertight)


# --- Distances ---


def sample_surface(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)
    return np.asarray(points)


def point_to_surface(points: np.ndarray, target: Mesh) -> np.ndarray:
    """Exact distance (metres) from each point to the nearest triangle of ``target``."""
    if target.is_empty:
        raise ValueError("target mesh is empty")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    triangles = target.vertices[target.faces]
    centroids = triangles.mean(axis=1)
    reach = np.linalg.norm(triangles - centroids[:, None], axis=2).max()

    # The nearest vertex bounds the surface distance from above.
    upper, _ = cKDTree(target.vertices).query(points)
    candidates = cKDTree(centroids).query_ball_point(points, upper + reach + 1e-12)

    counts = np.array([len(c) for c in candidates])
    point_ids = np.repeat(np.arange(points.shape[0]), counts)
    tri_ids = np.concatenate([np.asarray(c, dtype=np.int64) for c in candidates])
    closest = trimesh.triangles.closest_point(triangles[tri_ids], points[point_ids])
    dist = np.linalg.norm(closest - points[point_ids], axis=1)

    best = np.full(points.shape[0], np.inf)
    np.minimum.at(best, point_ids, dist)
    return best


def p2s(source: np.ndarray | Mesh, target: Mesh, *, sample_count: int = 20000, seed: int = 0) -> float:
    """Mean point-to-surface distance in cm; a mesh source is area-sampled first."""
    if isinstance(source, Mesh):
        source = sample_surface(source, sample_count, seed)
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if source.shape[0] == 0:
        raise ValueError("source point set is empty")
    return float(point_to_surface(source, target).mean() * CM_PER_M)


def chamfer(mesh_a: Mesh, mesh_b: Mesh, sample_count: int = 20000, *, seed: int = 0) -> float:
    samples_a = sample_surface(mesh_a, sample_count, seed)
    samples_b = sample_surface(mesh_b, sample_count, seed)
    return 0.5 * (p2s(samples_a, mesh_b) + p2s(samples_b, mesh_a))


# --- Registration ---


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_mesh(self, mesh: Mesh) -> Mesh:
        return Mesh(self.apply(mesh.vertices), mesh.faces)

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(1.0, np.eye(3), np.zeros(3))


def _closed_form(source: np.ndarray, target: np.ndarray) -> SimilarityTransform:
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    centered_s, centered_t = source - mu_s, target - mu_t
    sv = np.linalg.svd(centered_s, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise ValueError("degenerate correspondences: source points are coincident or collinear")
    rot, _ = Rotation.align_vectors(centered_t, centered_s)
    rotation = rot.as_matrix()
    rotated = centered_s @ rotation.T
    scale = float(np.sum(centered_t * rotated) / np.sum(centered_s * centered_s))
    return SimilarityTransform(scale, rotation, mu_t - scale * rotation @ mu_s)


def align_similarity(
    source: np.ndarray,
    target: np.ndarray,
    *,
    iterative: bool = False,
    iterations: int = 50,
    tolerance: float = 1e-10,
) -> SimilarityTransform:
    """Least-squares similarity mapping ``source`` onto ``target``.

    Closed-form mode expects row-wise correspondences. Iterative mode alternates
    nearest-neighbour matching against ``target`` with closed-form solves.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if source.shape[0] < 3:
        raise ValueError(f"need at least 3 points, got {source.shape[0]}")
    if not iterative:
        if source.shape != target.shape:
            raise ValueError(f"correspondence mismatch: {source.shape[0]} vs {target.shape[0]} points")
        return _closed_form(source, target)

    tree = cKDTree(target)
    transform = SimilarityTransform(1.0, np.eye(3), target.mean(axis=0) - source.mean(axis=0))
    previous = np.inf
    for _ in range(iterations):
        moved = transform.apply(source)
        dist, idx = tree.query(moved)
        error = float(np.mean(dist * dist))
        if previous - error < tolerance:
            break
        previous = error
        transform = _closed_form(source, target[idx])
    return transform


def register_mesh(mesh: Mesh, target: Mesh, config: MeshConfig) -> Mesh:
    """Bring ``mesh`` into the frame of ``target`` as ``config.alignment`` prescribes."""
    if config.alignment == "known":
        return mesh
    source = sample_surface(mesh, min(config.sample_count, 5000), config.sample_seed)
    reference = sample_surface(target, min(config.sample_count, 5000), config.sample_seed + 1)
    transform = align_similarity(source, reference, iterative=True)
    logger.info("Registered mesh: scale %.4f", transform.scale)
    return transform.apply_mesh(mesh)
