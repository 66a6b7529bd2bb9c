import numpy as np
import pytest

from graspfield.grids import (DomainError, EmptySurfaceError, GridMismatchError,
                              SdfGrid, grid_from_function, gradient_stencil,
                              load_sdfg, sample_trilinear, save_sdfg, sdf_min,
                              voxel_centers)
from graspfield.primitives import Box, Capsule, Cylinder, Sphere, Superellipsoid, analytic_sdf


def test_voxel_size_and_centers():
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 16)
    assert g.voxel_size == 2.0 / 16
    c = voxel_centers(16)
    assert c[0] == pytest.approx(-1 + 0.5 * g.voxel_size)
    assert c[-1] == pytest.approx(1 - 0.5 * g.voxel_size)
    np.testing.assert_allclose(np.diff(c), g.voxel_size)


def test_sphere_values():
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 64)
    h = g.voxel_size
    # stored value at the voxel center nearest the origin (rho = sqrt(3)*h/2)
    assert g.values[32, 32, 32] == pytest.approx(np.sqrt(3) * h / 2 - 0.5)
    assert sample_trilinear(g, np.array([0.5, 0.0, 0.0])) == pytest.approx(0.0, abs=5e-4)


def test_box_sdf_exact_outside_corner():
    b = Box(np.zeros(3), np.array([0.3, 0.3, 0.3]))
    # hand-derived: point on +x axis outside the face
    assert b.sdf(np.array([[0.5, 0.0, 0.0]]))[0] == pytest.approx(0.2)
    # outside past a corner: Euclidean distance to the corner
    d = b.sdf(np.array([[0.5, 0.5, 0.5]]))[0]
    assert d == pytest.approx(np.sqrt(3 * 0.2**2))
    # inside: negative distance to the nearest face
    assert b.sdf(np.array([[0.1, 0.0, 0.0]]))[0] == pytest.approx(-0.2)


def test_capsule_cylinder_values():
    c = Capsule(np.array([-0.2, 0, 0]), np.array([0.2, 0, 0]), 0.1)
    assert c.sdf(np.array([[0.0, 0.25, 0.0]]))[0] == pytest.approx(0.15)
    assert c.sdf(np.array([[0.35, 0.0, 0.0]]))[0] == pytest.approx(0.05)
    cy = Cylinder(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.3, 0.2)
    assert cy.sdf(np.array([[0.0, 0.0, 0.45]]))[0] == pytest.approx(0.15)
    assert cy.sdf(np.array([[0.4, 0.0, 0.0]]))[0] == pytest.approx(0.2)
    assert cy.sdf(np.array([[0.0, 0.0, 0.0]]))[0] == pytest.approx(-0.2)


def test_superellipsoid_sign_and_surface():
    se = Superellipsoid(np.zeros(3), np.array([0.3, 0.25, 0.2]), 3.0)
    assert se.sdf(np.array([[0.0, 0.0, 0.0]]))[0] < 0
    assert se.sdf(np.array([[0.3, 0.0, 0.0]]))[0] == pytest.approx(0.0, abs=1e-12)
    assert se.sdf(np.array([[0.6, 0.0, 0.0]]))[0] > 0


def test_domain_violation():
    with pytest.raises(DomainError):
        analytic_sdf(Sphere(np.array([0.8, 0, 0]), 0.5), 16)


def test_trilinear_exact_at_centers_and_linear_fields():
    rng = np.random.default_rng(0)
    g = analytic_sdf(Sphere(np.zeros(3), 0.4), 16)
    c = voxel_centers(16)
    idx = rng.integers(0, 16, size=(20, 3))
    pts = np.stack([c[idx[:, 0]], c[idx[:, 1]], c[idx[:, 2]]], axis=1)
    vals = sample_trilinear(g, pts)
    np.testing.assert_allclose(vals, g.values[idx[:, 2], idx[:, 1], idx[:, 0]],
                               rtol=0, atol=1e-15)

    lin = grid_from_function(lambda p: 0.3 * p[:, 0] - 0.1 * p[:, 1] + 0.05 * p[:, 2], 16)
    pts = rng.uniform(-0.9, 0.9, size=(50, 3))
    expect = 0.3 * pts[:, 0] - 0.1 * pts[:, 1] + 0.05 * pts[:, 2]
    np.testing.assert_allclose(sample_trilinear(lin, pts), expect, atol=1e-14)


def test_trilinear_sphere_interp_error():
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 64)
    v = sample_trilinear(g, np.array([0.25, 0.0, 0.0]))
    assert v == pytest.approx(-0.25, abs=(2 / 64) ** 2 * 4)


def test_trilinear_oob_modes():
    g = analytic_sdf(Sphere(np.zeros(3), 0.4), 16)
    p = np.array([1.5, 0.0, 0.0])
    assert sample_trilinear(g, p, oob="fill", fill_value=1.0) == 1.0
    with pytest.raises(DomainError):
        sample_trilinear(g, p, oob="error")
    _, flag = sample_trilinear(g, p, oob="clamp", return_oob_mask=True)
    assert flag is True


def test_gradient_constant_and_linear():
    g = SdfGrid(16, np.full((16, 16, 16), 0.25))
    f = gradient_stencil(g)
    assert not f.vectors.any()
    assert not f.interior_mask[0].any() and f.interior_mask[1:-1, 1:-1, 1:-1].all()

    lin = grid_from_function(lambda p: p[:, 0], 16)
    f = gradient_stencil(lin)
    inner = f.vectors[f.interior_mask]
    np.testing.assert_allclose(inner[:, 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(inner[:, 1:], 0.0, atol=1e-12)


def test_gradient_sphere_norms():
    # clamp-saturated voxels are excluded: the flat far field carries no
    # distance information (see decisions ledger)
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 64)
    f = gradient_stencil(g)
    c = voxel_centers(64)
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    rho = np.sqrt(X**2 + Y**2 + Z**2)
    # rho < 1.45 keeps every stencil read clear of the +-1 construction clamp
    # (saturation starts at rho = 1.5 for this sphere)
    sel = f.interior_mask & (rho > 2 * g.voxel_size) & (rho < 1.45)
    norms = np.linalg.norm(f.vectors[sel], axis=1)
    assert np.mean(np.abs(norms - 1.0)) <= 1e-3


def test_sdf_min_properties():
    a = analytic_sdf(Sphere(np.array([-0.4, 0, 0]), 0.25), 32)
    b = analytic_sdf(Sphere(np.array([0.4, 0, 0]), 0.25), 32)
    m = sdf_min(a, b)
    np.testing.assert_array_equal(m.values, sdf_min(b, a).values)
    np.testing.assert_array_equal(sdf_min(a, a).values, a.values)
    np.testing.assert_array_equal(m.values < 0, (a.values < 0) | (b.values < 0))
    with pytest.raises(GridMismatchError):
        sdf_min(a, analytic_sdf(Sphere(np.zeros(3), 0.25), 16))


def test_file_round_trip_bit_exact(tmp_path):
    g = analytic_sdf(Sphere(np.zeros(3), 0.5), 32)
    p1 = tmp_path / "a.sdfg"
    p2 = tmp_path / "b.sdfg"
    save_sdfg(g, p1)
    g2 = load_sdfg(p1)
    save_sdfg(g2, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # a freshly loaded grid is exactly f32-representable
    np.testing.assert_array_equal(g2.values, g2.values.astype(np.float32).astype(np.float64))


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.sdfg"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_sdfg(p)
