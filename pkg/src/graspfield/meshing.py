"""Triangle meshes: surface extraction, voxelization, export.

extract_surface wraps skimage marching cubes and returns vertices in domain
coordinates. mesh_to_sdf computes exact point-to-triangle distances with the
sign decided by ray-crossing parity along the three grid axes; inconsistent
parity means the mesh is not watertight and is rejected.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .grids import (DOMAIN_MIN, VALUE_CLAMP, DomainError, EmptySurfaceError,
                    SdfGrid, voxel_centers)

DEGENERATE_AREA_EPS = 1e-12


class NonWatertightError(ValueError):
    """Ray-parity voted differently across axes: the mesh has holes."""


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray   # (N,3) float64, domain units
    triangles: np.ndarray  # (M,3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_corners(self):
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    a, b, c = mesh.triangle_corners()
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def mesh_volume(mesh: TriMesh) -> float:
    """Signed volume via the divergence theorem (positive for outward-CCW shells)."""
    a, b, c = mesh.triangle_corners()
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def drop_degenerate(mesh: TriMesh, eps: float = DEGENERATE_AREA_EPS) -> TriMesh:
    keep = triangle_areas(mesh) > eps
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def extract_surface(grid: SdfGrid, iso: float = 0.0) -> TriMesh:
    """Marching-cubes triangulation of the iso level set, in domain coordinates."""
    V = grid.values
    if not (V.min() < iso < V.max()):
        raise EmptySurfaceError(f"no {iso} crossing: values in [{V.min()}, {V.max()}]")
    h = grid.voxel_size
    verts, faces, _, _ = measure.marching_cubes(V, level=iso, spacing=(h, h, h))
    # volume axes are (z,y,x); shift index coords to voxel-center positions
    verts = verts + (DOMAIN_MIN + 0.5 * h)
    verts = verts[:, ::-1].copy()
    mesh = TriMesh(verts, faces.astype(np.int64))
    return drop_degenerate(mesh)


# ---------------------------------------------------------------------------
# point-to-mesh distance

def _point_triangle_distance(pts: np.ndarray, a, b, c) -> np.ndarray:
    """Min distance from each point to one triangle, vectorized over points."""
    n = np.cross(b - a, c - a)
    nn = float(n @ n)
    rel = pts - a
    d_best = np.full(len(pts), np.inf)
    if nn > 0:
        # plane projection, accepted where barycentric coords are nonnegative
        dist_plane = (rel @ n) / np.sqrt(nn)
        proj = pts - dist_plane[:, None] * (n / np.sqrt(nn))
        v0, v1 = b - a, c - a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        denom = d00 * d11 - d01 * d01
        if denom > 0:
            rp = proj - a
            d20 = rp @ v0
            d21 = rp @ v1
            wv = (d11 * d20 - d01 * d21) / denom
            ww = (d00 * d21 - d01 * d20) / denom
            inside = (wv >= 0) & (ww >= 0) & (wv + ww <= 1)
            d_best = np.where(inside, np.abs(dist_plane), np.inf)
    for p0, p1 in ((a, b), (b, c), (c, a)):
        e = p1 - p0
        ee = float(e @ e)
        if ee == 0:
            d_seg = np.linalg.norm(pts - p0, axis=1)
        else:
            t = np.clip(((pts - p0) @ e) / ee, 0.0, 1.0)
            d_seg = np.linalg.norm(pts - p0 - t[:, None] * e, axis=1)
        d_best = np.minimum(d_best, d_seg)
    return d_best


def mesh_distance(mesh: TriMesh, pts: np.ndarray) -> np.ndarray:
    """Unsigned distance from points to the mesh surface."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    a, b, c = mesh.triangle_corners()
    out = np.full(len(pts), np.inf)
    for i in range(len(a)):
        out = np.minimum(out, _point_triangle_distance(pts, a[i], b[i], c[i]))
    return out


# ---------------------------------------------------------------------------
# parity sign

# irrational-ish ray jitter so lattice rays never graze vertices or edges
_JITTER = (np.sqrt(2.0) - 1.0) * 1e-6


def _axis_parity(mesh: TriMesh, R: int, axis: int) -> np.ndarray:
    """Crossing-parity interior test casting rays along one coordinate axis.

    Returns a bool (R,R,R) array in [iz,iy,ix] order. axis: 0=x, 1=y, 2=z.
    """
    cent = voxel_centers(R)
    h = 2.0 / R
    u_axes = [i for i in range(3) if i != axis]  # the 2 ray-lattice axes
    ray_u = cent + _JITTER * h
    ray_v = cent + 2.0 * _JITTER * h

    va, vb, vc = mesh.triangle_corners()
    tri2d = np.stack([  # projections of corners onto the lattice plane
        np.stack([va[:, u_axes[0]], va[:, u_axes[1]]], axis=1),
        np.stack([vb[:, u_axes[0]], vb[:, u_axes[1]]], axis=1),
        np.stack([vc[:, u_axes[0]], vc[:, u_axes[1]]], axis=1),
    ], axis=1)  # (M, 3, 2)
    tri_axis = np.stack([va[:, axis], vb[:, axis], vc[:, axis]], axis=1)  # (M,3)

    starts = np.zeros((R, R, R), dtype=np.int32)  # crossing begins at this x-slot
    for m in range(len(tri2d)):
        (au, av_), (bu, bv), (cu, cv) = tri2d[m]
        det = (bu - au) * (cv - av_) - (cu - au) * (bv - av_)
        scale = max(abs(bu - au), abs(cu - au), abs(bv - av_), abs(cv - av_), 1e-30)
        if abs(det) < 1e-12 * scale * scale:
            continue  # projection degenerate: ray runs parallel to the plane
        j0 = np.searchsorted(ray_u, min(au, bu, cu))
        j1 = np.searchsorted(ray_u, max(au, bu, cu), side="right")
        k0 = np.searchsorted(ray_v, min(av_, bv, cv))
        k1 = np.searchsorted(ray_v, max(av_, bv, cv), side="right")
        uu = ray_u[j0:j1]
        vv = ray_v[k0:k1]
        if uu.size == 0 or vv.size == 0:
            continue
        U, Vv = np.meshgrid(uu, vv, indexing="xy")  # (nv, nu)
        w0 = ((bu - U) * (cv - Vv) - (cu - U) * (bv - Vv)) / det
        w1 = ((cu - U) * (av_ - Vv) - (au - U) * (cv - Vv)) / det
        w2 = 1.0 - w0 - w1
        hit = (w0 > 0) & (w1 > 0) & (w2 > 0)
        if not hit.any():
            continue
        cross = w0 * tri_axis[m, 0] + w1 * tri_axis[m, 1] + w2 * tri_axis[m, 2]
        kk, jj = np.nonzero(hit)
        slot = np.searchsorted(cent, cross[kk, jj])
        ok = slot < R
        jj, kk, slot = jj[ok] + j0, kk[ok] + k0, slot[ok]
        if axis == 0:
            np.add.at(starts, (kk, jj, slot), 1)
        elif axis == 1:
            np.add.at(starts, (kk, slot, jj), 1)
        else:
            np.add.at(starts, (slot, kk, jj), 1)
    counts = np.cumsum(starts, axis=2 - axis)
    return (counts % 2).astype(bool)


def mesh_to_sdf(mesh: TriMesh, R: int) -> SdfGrid:
    """Voxelize a watertight mesh: unsigned distance + parity sign, clamped to +-1."""
    if R < 8:
        raise ValueError(f"R must be >= 8, got {R}")
    if np.any(np.abs(mesh.vertices) > 1.0):
        raise DomainError("mesh vertices outside [-1,1]^3")
    if len(mesh.triangles) == 0:
        raise ValueError("empty mesh")
    cent = voxel_centers(R)
    Z, Y, X = np.meshgrid(cent, cent, cent, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    dist = mesh_distance(mesh, pts).reshape(R, R, R)

    par = [_axis_parity(mesh, R, axis) for axis in (0, 1, 2)]
    agree = (par[0] == par[1]) & (par[1] == par[2])
    # voxels essentially on the surface get a pass on the parity vote
    on_surface = dist < 1e-7
    bad = ~agree & ~on_surface
    if bad.any():
        raise NonWatertightError(
            f"parity inconsistent at {int(bad.sum())} voxels; mesh is not watertight"
        )
    votes = par[0].astype(np.int8) + par[1].astype(np.int8) + par[2].astype(np.int8)
    inside = votes >= 2
    signed = np.where(inside, -dist, dist)
    return SdfGrid(R, np.clip(signed, -VALUE_CLAMP, VALUE_CLAMP))


# ---------------------------------------------------------------------------
# sampling and generators

def sample_surface_points(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """Area-weighted uniform surface samples; deterministic per seed."""
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    a, b, c = mesh.triangle_corners()
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    return a[idx] + u[:, None] * (b[idx] - a[idx]) + v[:, None] * (c[idx] - a[idx])


def sample_surface_with_normals(mesh: TriMesh, n: int, seed: int):
    """Like sample_surface_points but also returns the face normal per sample."""
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    a, b, c = mesh.triangle_corners()
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    pts = a[idx] + u[:, None] * (b[idx] - a[idx]) + v[:, None] * (c[idx] - a[idx])
    nrm = np.cross(b[idx] - a[idx], c[idx] - a[idx])
    norms = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.maximum(norms, 1e-300)
    return pts, nrm


def icosphere(radius: float, center=(0.0, 0.0, 0.0), subdivisions: int = 2) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts[0])
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m = m / np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        for (i, j, k) in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces, dtype=np.int64))


def box_mesh(center, half_extents) -> TriMesh:
    """Axis-aligned box as 12 triangles with outward orientation."""
    c = np.asarray(center, dtype=np.float64)
    e = np.asarray(half_extents, dtype=np.float64)
    corners = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64) * e + c
    quads = [
        (0, 3, 2, 1),  # z-
        (4, 5, 6, 7),  # z+
        (0, 1, 5, 4),  # y-
        (2, 3, 7, 6),  # y+
        (0, 4, 7, 3),  # x-
        (1, 2, 6, 5),  # x+
    ]
    tris = []
    for (a, b, cc, d) in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriMesh(corners, np.array(tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# export

def save_ply(mesh: TriMesh, path) -> None:
    """Binary little-endian PLY."""
    n, m = len(mesh.vertices), len(mesh.triangles)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {m}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        face_rec = np.empty(m, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        face_rec["n"] = 3
        face_rec["idx"] = mesh.triangles.astype("<i4")
        fh.write(face_rec.tobytes())


def load_ply(path) -> TriMesh:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = m = 0
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("element face"):
            m = int(line.split()[-1])
    verts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=end).reshape(n, 3)
    face_rec = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))],
                             count=m, offset=end + 12 * n)
    return TriMesh(verts.astype(np.float64), face_rec["idx"].astype(np.int64))


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0]+1} {t[1]+1} {t[2]+1}\n")


def load_obj(path) -> TriMesh:
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(np.array(verts), np.array(tris, dtype=np.int64))
