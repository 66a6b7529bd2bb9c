import numpy as np
import pytest

from graspfield.grids import EmptySurfaceError, sample_trilinear
from graspfield.meshing import (NonWatertightError, TriMesh, box_mesh,
                                drop_degenerate, extract_surface, icosphere,
                                load_obj, load_ply, mesh_distance, mesh_to_sdf,
                                mesh_volume, sample_surface_points,
                                sample_surface_with_normals, save_obj, save_ply,
                                triangle_areas)
from graspfield.primitives import Sphere, analytic_sdf


def test_extract_surface_sphere_radius():
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 64)
    mesh = extract_surface(g)
    r = np.linalg.norm(mesh.vertices, axis=1)
    h = g.voxel_size
    assert np.abs(r - 0.5).max() < h
    # extracted vertices sit on the zero level of the sampled field
    vals = sample_trilinear(g, mesh.vertices)
    assert np.abs(vals).max() < 0.5 * h


def test_extract_surface_empty():
    g = analytic_sdf(Sphere(np.zeros(3), 0.05), 8)
    # R=8 resolves this sphere poorly but still crosses zero; shrink further
    with pytest.raises(EmptySurfaceError):
        extract_surface(analytic_sdf(Sphere(np.array([0.0, 0.0, 0.0]), 1e-4), 8))


def test_mesh_volume_and_areas():
    m = box_mesh(np.zeros(3), np.array([0.3, 0.2, 0.1]))
    assert mesh_volume(m) == pytest.approx(0.6 * 0.4 * 0.2)
    assert triangle_areas(m).sum() == pytest.approx(2 * (0.6 * 0.4 + 0.6 * 0.2 + 0.4 * 0.2))
    s = icosphere(0.5, np.zeros(3), subdivisions=3)
    # inscribed polyhedron: volume lands just under the sphere volume
    assert mesh_volume(s) == pytest.approx(4 / 3 * np.pi * 0.125, rel=1.2e-2)
    assert mesh_volume(s) < 4 / 3 * np.pi * 0.125


def test_drop_degenerate():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=float)
    t = np.array([[0, 1, 2], [0, 1, 3]])  # second has zero area
    m = drop_degenerate(TriMesh(v, t))
    assert len(m.triangles) == 1


def test_mesh_distance_unit_triangle():
    m = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    d = mesh_distance(m, np.array([[0.25, 0.25, 0.5], [2.0, 0.0, 0.0], [-1.0, -1.0, 0.0]]))
    assert d[0] == pytest.approx(0.5)
    assert d[1] == pytest.approx(1.0)
    assert d[2] == pytest.approx(np.sqrt(2))


def test_mesh_to_sdf_icosphere():
    m = icosphere(0.5, np.zeros(3), subdivisions=3)
    g = mesh_to_sdf(m, 32)
    ref = analytic_sdf(Sphere(np.zeros(3), 0.5), 32)
    # facet chords put the mesh slightly inside the true sphere
    assert np.abs(g.values - ref.values).max() < 2 * g.voxel_size
    # signs agree away from the surface
    far = np.abs(ref.values) > g.voxel_size
    assert np.array_equal(np.sign(g.values[far]), np.sign(ref.values[far]))


def test_mesh_to_sdf_open_mesh_rejected():
    m = TriMesh(np.array([[0.0, 0, 0], [0.5, 0, 0], [0, 0.5, 0]]), np.array([[0, 1, 2]]))
    with pytest.raises(NonWatertightError):
        mesh_to_sdf(m, 16)


def test_sample_surface_points():
    m = icosphere(0.4, np.zeros(3), subdivisions=2)
    pts = sample_surface_points(m, 500, seed=3)
    assert pts.shape == (500, 3)
    assert np.abs(mesh_distance(m, pts)).max() < 1e-9
    pts2 = sample_surface_points(m, 500, seed=3)
    np.testing.assert_array_equal(pts, pts2)
    p, n = sample_surface_with_normals(m, 200, seed=1)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    # icosphere normals point away from the center
    assert (np.sum(p * n, axis=1) > 0).all()


def test_ply_round_trip(tmp_path):
    m = icosphere(0.3, np.array([0.1, 0.0, -0.1]), subdivisions=1)
    path = tmp_path / "m.ply"
    save_ply(m, path)
    m2 = load_ply(path)
    np.testing.assert_allclose(m2.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(m2.triangles, m.triangles)


def test_obj_round_trip(tmp_path):
    m = box_mesh(np.zeros(3), np.array([0.2, 0.3, 0.1]))
    path = tmp_path / "m.obj"
    save_obj(m, path)
    m2 = load_obj(path)
    np.testing.assert_allclose(m2.vertices, m.vertices, atol=1e-9)
    np.testing.assert_array_equal(m2.triangles, m.triangles)
