from __future__ import annotations

import numpy as np
import pytest
import trimesh
from scipy.spatial.transform import Rotation

from animatable_nerf.geometry import (
    GridSpec,
    Mesh,
    MeshConfig,
    align_similarity,
    chamfer,
    extract_mesh,
    grid_around,
    is_watertight,
    load_obj,
    p2s,
    point_to_surface,
    register_mesh,
    sample_surface,
    save_obj,
)
from animatable_nerf.radiance_field import FieldOutput


class _BallField:
    def __init__(self, radius=0.5, density=100.0):
        self.radius = radius
        self.density = density

    def evaluate(self, points, directions=None):
        points = np.asarray(points).reshape(-1, 3)
        inside = np.linalg.norm(points, axis=1) < self.radius
        return FieldOutput(color=np.zeros((points.shape[0], 3)), density=np.where(inside, self.density, 0.0))


def _square(z=0.0):
    vertices = np.array([[0.0, 0.0, z], [1.0, 0.0, z], [1.0, 1.0, z], [0.0, 1.0, z]])
    return Mesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


def _box():
    box = trimesh.creation.box(extents=(1.0, 0.5, 0.25))
    return Mesh(np.asarray(box.vertices), np.asarray(box.faces))


class TestExtractMeshUnit:
    def test_sphere_radius_within_a_voxel(self):
        grid = GridSpec((64, 64, 64), (-0.8, -0.8, -0.8), (0.8, 0.8, 0.8), iso_level=10.0)
        mesh = extract_mesh(_BallField(), grid)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        diagonal = float(np.linalg.norm(grid.spacing))
        assert not mesh.is_empty
        assert np.all(np.abs(radii - 0.5) <= diagonal)
        assert is_watertight(mesh)

    def test_unreachable_iso_level_gives_empty_mesh(self):
        grid = GridSpec((16, 16, 16), (-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), iso_level=1000.0)
        assert extract_mesh(_BallField(), grid).is_empty

    def test_grid_around_pads_bounds(self):
        grid = grid_around(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]), 8, 0.5, 4.0)
        assert grid.bounds_min == (-0.5, -0.5, -0.5)
        assert grid.bounds_max == (1.5, 2.5, 3.5)
        assert grid.resolution == (8, 8, 8)
        assert grid.points().shape == (512, 3)

    def test_degenerate_grid(self):
        with pytest.raises(ValueError, match="degenerate"):
            GridSpec((4, 4, 4), (0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


class TestMeshIoUnit:
    def test_obj_round_trip(self, tmp_path):
        mesh = _box()
        save_obj(mesh, tmp_path / "box.obj")
        loaded = load_obj(tmp_path / "box.obj")
        np.testing.assert_allclose(loaded.vertices, mesh.vertices, atol=1e-7)
        np.testing.assert_array_equal(loaded.faces, mesh.faces)

    def test_empty_mesh_round_trip(self, tmp_path):
        save_obj(Mesh.empty(), tmp_path / "empty.obj")
        assert load_obj(tmp_path / "empty.obj").is_empty

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no mesh at"):
            load_obj(tmp_path / "missing.obj")

    def test_watertight_box(self):
        assert is_watertight(_box())
        assert not is_watertight(_square())

    def test_face_index_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


class TestDistancesUnit:
    def test_point_to_surface_matches_brute_force(self):
        mesh = _box()
        points = np.random.default_rng(0).uniform(-1.0, 1.0, size=(200, 3))
        triangles = mesh.vertices[mesh.faces]
        brute = np.array(
            [
                np.min(
                    np.linalg.norm(
                        trimesh.triangles.closest_point(triangles, np.repeat(p[None], len(triangles), axis=0)) - p,
                        axis=1,
                    )
                )
                for p in points
            ]
        )
        np.testing.assert_allclose(point_to_surface(points, mesh), brute, atol=1e-12)

    def test_points_on_surface_are_zero(self):
        mesh = _box()
        samples = sample_surface(mesh, 500, seed=1)
        assert point_to_surface(samples, mesh).max() < 1e-9

    def test_offset_plane_is_one_centimetre(self):
        assert p2s(_square(0.01), _square(0.0), sample_count=2000) == pytest.approx(1.0, abs=1e-9)

    def test_chamfer_is_symmetric_and_equals_offset(self):
        a, b = _square(0.0), _square(0.01)
        assert chamfer(a, b, 1000) == chamfer(b, a, 1000)
        assert chamfer(a, b, 1000) == pytest.approx(1.0, abs=1e-9)

    def test_identical_meshes(self):
        assert chamfer(_box(), _box(), 2000) == pytest.approx(0.0, abs=1e-9)

    def test_empty_inputs(self):
        with pytest.raises(ValueError, match="empty"):
            sample_surface(Mesh.empty(), 10)
        with pytest.raises(ValueError, match="empty"):
            point_to_surface(np.zeros((1, 3)), Mesh.empty())


class TestAlignmentUnit:
    def _known(self):
        rot = Rotation.from_rotvec([0.0, 0.0, np.radians(3.0)]).as_matrix() @ Rotation.from_rotvec(
            [np.radians(2.0), 0.0, 0.0]
        ).as_matrix()
        return 1.02, rot, np.array([0.05, -0.02, 0.03])

    def test_closed_form_recovers_similarity(self):
        source = np.random.default_rng(0).normal(size=(50, 3))
        scale, rot, trans = self._known()
        target = scale * source @ rot.T + trans
        transform = align_similarity(source, target)
        assert transform.scale == pytest.approx(scale, rel=1e-10)
        np.testing.assert_allclose(transform.rotation, rot, atol=1e-10)
        np.testing.assert_allclose(transform.translation, trans, atol=1e-10)
        np.testing.assert_allclose(transform.apply(source), target, atol=1e-10)

    def test_iterative_recovers_small_misalignment(self):
        source = np.random.default_rng(1).uniform(-1.0, 1.0, size=(40, 3))
        rot = Rotation.from_rotvec([0.0, np.radians(1.0), 0.0]).as_matrix()
        target = 1.005 * source @ rot.T + np.array([0.01, 0.0, -0.01])
        transform = align_similarity(source, target[::-1], iterative=True)
        np.testing.assert_allclose(transform.apply(source), target, atol=1e-6)

    def test_collinear_points_rejected(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="degenerate"):
            align_similarity(line, line)

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            align_similarity(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_register_known_is_identity(self):
        mesh = _box()
        assert register_mesh(mesh, _square(), MeshConfig()) is mesh

    def test_registered_sphere_chamfer_under_a_voxel(self):
        icosphere = trimesh.creation.icosphere(subdivisions=3, radius=0.5)
        sphere = Mesh(np.asarray(icosphere.vertices), np.asarray(icosphere.faces))
        scale, rot, trans = self._known()
        moved = Mesh(scale * sphere.vertices @ rot.T + trans, sphere.faces)
        voxel_cm = 1.6 / 63 * 100.0

        assert chamfer(moved, sphere, 2000) > 1.0
        registered = register_mesh(moved, sphere, MeshConfig(sample_count=4000, alignment="iterative"))
        assert chamfer(registered, sphere, 2000) < voxel_cm
        exact = align_similarity(moved.vertices, sphere.vertices).apply_mesh(moved)
        assert chamfer(exact, sphere, 2000) < 1e-6

    def test_unknown_alignment(self):
        with pytest.raises(ValueError, match="alignment"):
            MeshConfig(alignment="icp")
