"""Similarity transforms, grid-frame metadata, SDF augmentation, canonicalization.

A SimilarityTransform maps geometry forward, x -> s*R*x + t. Warping a field
by that map means sampling the canonical field at the inverse-warped
coordinates and rescaling distances by s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import (DomainError, SdfGrid, VALUE_CLAMP, grid_from_function,
                    sample_trilinear, voxel_centers)

_ORTHO_TOL = 1e-9


class FeasibilityError(DomainError):
    """The transformed surface would leave the padded domain."""


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray  # 3x3, proper
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        Rm = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tv = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if np.max(np.abs(Rm.T @ Rm - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(Rm) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", Rm)
        object.__setattr__(self, "translation", tv)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=np.float64) @ self.rotation.T) + self.translation

    def apply_inverse(self, pts: np.ndarray) -> np.ndarray:
        return ((np.asarray(pts, dtype=np.float64) - self.translation) @ self.rotation) / self.scale

    def to_dict(self) -> dict:
        return {"s": float(self.scale),
                "R_g": [float(x) for x in self.rotation.ravel()],
                "t": [float(x) for x in self.translation]}

    @staticmethod
    def from_dict(d: dict) -> "SimilarityTransform":
        return SimilarityTransform(float(d["s"]),
                                   np.array(d["R_g"], dtype=np.float64).reshape(3, 3),
                                   np.array(d["t"], dtype=np.float64))


def identity_transform() -> SimilarityTransform:
    return SimilarityTransform(1.0, np.eye(3), np.zeros(3))


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Transform applying b first, then a."""
    return SimilarityTransform(a.scale * b.scale, a.rotation @ b.rotation,
                               a.scale * (b.translation @ a.rotation.T) + a.translation)


def invert(a: SimilarityTransform) -> SimilarityTransform:
    rt = a.rotation.T
    return SimilarityTransform(1.0 / a.scale, rt, -(a.translation @ rt.T) / a.scale)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True)
class GridFrame:
    """Camera-aligned frame metadata: grid +z is the viewing direction."""

    camera_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    rotation_to_world: np.ndarray = field(default_factory=lambda: np.eye(3))
    metric_scale: float = 0.15  # meters per domain unit

    def __post_init__(self):
        ax = np.asarray(self.camera_axis, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
            raise ValueError("camera_axis must be unit norm")
        if self.metric_scale <= 0:
            raise ValueError("metric_scale must be positive")
        object.__setattr__(self, "camera_axis", ax)
        object.__setattr__(self, "rotation_to_world",
                           np.asarray(self.rotation_to_world, dtype=np.float64).reshape(3, 3))


def transformed_analytic(prim, xf: SimilarityTransform):
    """Callable evaluating the exact SDF of a similarity-transformed primitive."""

    def f(pts):
        return xf.scale * prim.sdf(xf.apply_inverse(pts))

    return f


def surface_voxel_points(grid: SdfGrid) -> np.ndarray:
    """Centers of voxels within one voxel size of the zero level set."""
    h = grid.voxel_size
    mask = np.abs(grid.values) < h
    if not mask.any():
        raise ValueError("grid has no surface band (empty negative set?)")
    iz, iy, ix = np.nonzero(mask)
    c = voxel_centers(grid.resolution)
    return np.stack([c[ix], c[iy], c[iz]], axis=1)


def max_feasible_scale(grid: SdfGrid, rotation: np.ndarray,
                       padding_voxels: int = 0) -> float:
    """Largest scale keeping the rotated surface inside the padded domain."""
    if not (grid.values < 0).any():
        raise ValueError("grid has an empty negative set")
    pts = surface_voxel_points(grid) @ np.asarray(rotation, dtype=np.float64).T
    half_extent = (pts.max(axis=0) - pts.min(axis=0)) / 2.0
    L = 1.0 - padding_voxels * grid.voxel_size
    widest = float(half_extent.max())
    if widest == 0.0:
        return np.inf
    return L / widest


def augment_sdf(grid: SdfGrid, xf: SimilarityTransform) -> SdfGrid:
    """Warp a field by a similarity transform: s * S(R^T (x - t) / s).

    Out-of-domain reads are exterior by the feasibility precondition and
    return +1. Output is clamped like any constructed grid.
    """
    pts = surface_voxel_points(grid)
    mapped = xf.apply(pts)
    if np.any(np.abs(mapped) > 1.0):
        raise FeasibilityError("transformed surface escapes the domain")
    R = grid.resolution
    c = voxel_centers(R)
    Z, Y, X = np.meshgrid(c, c, c, indexing="ij")
    q = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    src = xf.apply_inverse(q)
    vals = sample_trilinear(grid, src, oob="fill", fill_value=VALUE_CLAMP)
    out = xf.scale * vals.reshape(R, R, R)
    return SdfGrid(R, np.clip(out, -VALUE_CLAMP, VALUE_CLAMP))


def sample_augmentation(rng: np.random.Generator, grid: SdfGrid,
                        rotation: np.ndarray,
                        padding_voxels: int = 2) -> SimilarityTransform:
    """Draw a random downscale + in-plane shift; z recentered, scale clipped.

    s ~ U(0.5, 1.0) clipped to the feasible maximum for the given rotation,
    (t_x, t_y) uniform over the translations keeping the surface inside the
    padded domain, t_z centering the surface z-interval.
    """
    s_max = max_feasible_scale(grid, rotation, padding_voxels)
    s = min(float(rng.uniform(0.5, 1.0)), s_max)
    pts = surface_voxel_points(grid) @ np.asarray(rotation, dtype=np.float64).T * s
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    L = 1.0 - padding_voxels * grid.voxel_size
    t = np.zeros(3)
    for ax in range(2):
        t_lo = -L - lo[ax]
        t_hi = L - hi[ax]
        if t_hi < t_lo:  # no slack: pin to the centering shift
            t[ax] = -(lo[ax] + hi[ax]) / 2.0
        else:
            t[ax] = float(rng.uniform(t_lo, t_hi))
    t[2] = -(lo[2] + hi[2]) / 2.0
    return SimilarityTransform(s, rotation, t)


def canonicalize_scene(hand_geom, object_geom, fingertips: np.ndarray,
                       padding_voxels: int = 2, resolution: int = 64):
    """Scale and shift the hand+object scene into the padded grid.

    One shared transform (no rotation): the union bounding box fits with the
    requested voxel padding and is centered in x and y; the fingertip
    centroid maps to the z center. Returns (transform, hand_grid, object_grid).
    """
    tips = np.atleast_2d(np.asarray(fingertips, dtype=np.float64))
    if tips.shape[0] < 1:
        raise ValueError("need at least one fingertip")
    lo_h, hi_h = hand_geom.bounds()
    lo_o, hi_o = object_geom.bounds()
    lo = np.minimum(lo_h, lo_o)
    hi = np.maximum(hi_h, hi_o)
    if np.any(hi <= lo):
        raise ValueError("empty scene bounds")
    h = 2.0 / resolution
    L = 1.0 - padding_voxels * h
    z_f = float(tips[:, 2].mean())
    s_terms = [2.0 * L / (hi[0] - lo[0]), 2.0 * L / (hi[1] - lo[1])]
    z_reach = max(hi[2] - z_f, z_f - lo[2])
    if z_reach > 0:
        s_terms.append(L / z_reach)
    s = min(s_terms)
    t = np.array([
        -s * (lo[0] + hi[0]) / 2.0,
        -s * (lo[1] + hi[1]) / 2.0,
        -s * z_f,
    ])
    xf = SimilarityTransform(s, np.eye(3), t)
    hand_grid = grid_from_function(transformed_analytic(hand_geom, xf), resolution)
    object_grid = grid_from_function(transformed_analytic(object_geom, xf), resolution)
    return xf, hand_grid, object_grid
