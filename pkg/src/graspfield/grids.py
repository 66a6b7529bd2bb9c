"""Voxel signed-distance grids over the fixed cube [-1,1]^3.

Conventions used throughout the package:
  - negative inside, positive outside
  - voxel size h = 2/R, voxel centers at -1 + (i+0.5)*h
  - values are stored z-major: values[iz, iy, ix], so values.ravel()
    matches the on-disk payload order (z slowest, x fastest)
  - construction clamps values to [-1, 1]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DOMAIN_MIN = -1.0
DOMAIN_MAX = 1.0
VALUE_CLAMP = 1.0

_MAGIC = b"SDFG"
_VERSION = 1


class DomainError(ValueError):
    """A point or shape left the [-1,1]^3 domain."""


class GridMismatchError(ValueError):
    """Two grids that must share a resolution do not."""


class EmptySurfaceError(ValueError):
    """A grid has no zero crossing to extract."""


@dataclass(frozen=True)
class SdfGrid:
    """Scalar signed-distance samples on an R^3 lattice.

    values[iz, iy, ix] holds the SDF at the voxel center
    (-1+(ix+.5)h, -1+(iy+.5)h, -1+(iz+.5)h).
    """

    resolution: int
    values: np.ndarray

    def __post_init__(self):
        R = self.resolution
        if R < 2:
            raise ValueError(f"resolution must be >= 2, got {R}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (R, R, R):
            raise ValueError(f"values shape {v.shape} != ({R},{R},{R})")
        object.__setattr__(self, "values", v)

    @property
    def voxel_size(self) -> float:
        return 2.0 / self.resolution

    def copy_with(self, values: np.ndarray) -> "SdfGrid":
        return SdfGrid(self.resolution, values)


@dataclass(frozen=True)
class GradientField:
    """Central-difference gradients (gx,gy,gz) per voxel, domain units.

    The outermost one-voxel shell carries zero vectors and
    interior_mask == False there.
    """

    resolution: int
    vectors: np.ndarray       # (R,R,R,3), ordered (gx,gy,gz)
    interior_mask: np.ndarray  # (R,R,R) bool


def voxel_centers(R: int) -> np.ndarray:
    """1D array of per-axis voxel center coordinates."""
    h = 2.0 / R
    return DOMAIN_MIN + (np.arange(R) + 0.5) * h


def center_grids(R: int):
    """Return (X, Y, Z) coordinate arrays shaped (R,R,R) in [iz,iy,ix] order."""
    c = voxel_centers(R)
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    return X, Y, Z


def grid_from_function(f, R: int) -> SdfGrid:
    """Evaluate f(points (N,3)) -> (N,) at all voxel centers, clamp to +-1."""
    X, Y, Z = center_grids(R)
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vals = np.asarray(f(pts), dtype=np.float64).reshape(R, R, R)
    return SdfGrid(R, np.clip(vals, -VALUE_CLAMP, VALUE_CLAMP))


def sample_trilinear(grid: SdfGrid, pts: np.ndarray, *, oob: str = "clamp",
                     fill_value: float = VALUE_CLAMP, return_oob_mask: bool = False):
    """Trilinear interpolation of grid values at domain-coordinate points.

    pts: (..., 3). oob is one of:
      "clamp" - out-of-domain points sample the clamped/edge value
      "fill"  - out-of-domain points return fill_value exactly
      "error" - out-of-domain points raise DomainError
    In-domain points between the boundary voxel center and the domain face
    use edge replication. Exact at voxel centers.
    """
    p = np.asarray(pts, dtype=np.float64)
    scalar_in = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[-1] != 3:
        raise ValueError("points must have trailing dimension 3")
    R = grid.resolution
    h = grid.voxel_size
    outside = np.any((p < DOMAIN_MIN) | (p > DOMAIN_MAX), axis=-1)
    if oob == "error" and np.any(outside):
        raise DomainError("sample point outside [-1,1]^3")

    # continuous index per axis; clamp to the center lattice (edge replication)
    u = (p - DOMAIN_MIN) / h - 0.5
    u = np.clip(u, 0.0, R - 1.0)
    i0 = np.floor(u).astype(np.int64)
    i0 = np.minimum(i0, R - 2)
    f = u - i0
    ix0, iy0, iz0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    V = grid.values

    def g(dz, dy, dx):
        return V[iz0 + dz, iy0 + dy, ix0 + dx]

    c00 = g(0, 0, 0) * (1 - fx) + g(0, 0, 1) * fx
    c01 = g(0, 1, 0) * (1 - fx) + g(0, 1, 1) * fx
    c10 = g(1, 0, 0) * (1 - fx) + g(1, 0, 1) * fx
    c11 = g(1, 1, 0) * (1 - fx) + g(1, 1, 1) * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz

    if oob == "fill":
        out = np.where(outside, fill_value, out)
    elif oob not in ("clamp", "error"):
        raise ValueError(f"unknown oob mode {oob!r}")
    if scalar_in:
        out = out[0]
        outside = bool(outside[0])
    if return_oob_mask:
        return out, outside
    return out


def gradient_stencil(grid: SdfGrid) -> GradientField:
    """Per-axis central differences divided by 2h; zero on the boundary shell."""
    R = grid.resolution
    if R < 3:
        raise ValueError("gradient stencil needs R >= 3")
    h = grid.voxel_size
    V = grid.values
    vec = np.zeros((R, R, R, 3), dtype=np.float64)
    inv2h = 1.0 / (2.0 * h)
    # axes of V are (z, y, x); vector channels are (gx, gy, gz)
    vec[:, :, 1:-1, 0] = (V[:, :, 2:] - V[:, :, :-2]) * inv2h
    vec[:, 1:-1, :, 1] = (V[:, 2:, :] - V[:, :-2, :]) * inv2h
    vec[1:-1, :, :, 2] = (V[2:, :, :] - V[:-2, :, :]) * inv2h
    mask = np.zeros((R, R, R), dtype=bool)
    mask[1:-1, 1:-1, 1:-1] = True
    vec[~mask] = 0.0
    return GradientField(R, vec, mask)


def sdf_min(a: SdfGrid, b: SdfGrid) -> SdfGrid:
    """Voxelwise minimum; the union bound for composed shapes."""
    if a.resolution != b.resolution:
        raise GridMismatchError(f"resolutions differ: {a.resolution} vs {b.resolution}")
    return SdfGrid(a.resolution, np.minimum(a.values, b.values))


def save_sdfg(grid: SdfGrid, path, *, channel_dtype: str = "f4") -> None:
    """Write the binary grid format.

    Layout: magic "SDFG", u32 version=1, u32 R, 3*f64 domain min, 3*f64
    domain max, then R^3 payload little-endian z-major. channel_dtype "f4"
    is the standard grid; "u1" stores a binary channel.
    """
    R = grid.resolution
    header = _MAGIC + struct.pack("<II", _VERSION, R)
    header += struct.pack("<3d", DOMAIN_MIN, DOMAIN_MIN, DOMAIN_MIN)
    header += struct.pack("<3d", DOMAIN_MAX, DOMAIN_MAX, DOMAIN_MAX)
    if channel_dtype == "f4":
        payload = grid.values.astype("<f4").tobytes()
    elif channel_dtype == "u1":
        payload = grid.values.astype(np.uint8).tobytes()
    else:
        raise ValueError(f"unsupported channel dtype {channel_dtype!r}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_sdfg(path, *, channel_dtype: str = "f4") -> SdfGrid:
    """Read a grid written by save_sdfg. Values come back as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, R = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    dmin = struct.unpack_from("<3d", raw, 12)
    dmax = struct.unpack_from("<3d", raw, 36)
    if not (np.allclose(dmin, DOMAIN_MIN) and np.allclose(dmax, DOMAIN_MAX)):
        raise ValueError(f"{path}: unexpected domain bounds {dmin} {dmax}")
    off = 60
    if channel_dtype == "f4":
        vals = np.frombuffer(raw, dtype="<f4", count=R**3, offset=off)
    elif channel_dtype == "u1":
        vals = np.frombuffer(raw, dtype=np.uint8, count=R**3, offset=off)
    else:
        raise ValueError(f"unsupported channel dtype {channel_dtype!r}")
    if vals.size != R**3:
        raise ValueError(f"{path}: truncated payload")
    return SdfGrid(R, vals.astype(np.float64).reshape(R, R, R))
