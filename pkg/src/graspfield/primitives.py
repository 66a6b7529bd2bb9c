"""Analytic signed-distance primitives.

Sphere, box, capsule and cylinder evaluate exact Euclidean SDFs.
Superellipsoid returns the radial approximation (sign exact, magnitude an
upper bound of the true distance); callers that need metric accuracy near
the surface should stick to the exact four.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import DomainError, SdfGrid, grid_from_function


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(pts - np.asarray(self.center), axis=-1)
        return d - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        q = np.abs(pts - np.asarray(self.center)) - np.asarray(self.half_extents)
        outer = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inner = np.minimum(q.max(axis=-1), 0.0)
        return outer + inner

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        e = np.asarray(self.half_extents, dtype=np.float64)
        return c - e, c + e


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            return np.linalg.norm(pts - a, axis=-1) - self.radius
        t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(pts - closest, axis=-1) - self.radius

    def bounds(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        return np.minimum(a, b) - self.radius, np.maximum(a, b) + self.radius


@dataclass(frozen=True)
class Cylinder:
    """Finite capped cylinder: axis through center, unit direction, half height."""

    center: np.ndarray
    axis: np.ndarray
    half_height: float
    radius: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        u = np.asarray(self.axis, dtype=np.float64)
        u = u / np.linalg.norm(u)
        rel = pts - c
        y = rel @ u
        perp = rel - y[..., None] * u
        rho = np.linalg.norm(perp, axis=-1)
        dx = rho - self.radius
        dy = np.abs(y) - self.half_height
        outer = np.sqrt(np.maximum(dx, 0.0) ** 2 + np.maximum(dy, 0.0) ** 2)
        inner = np.minimum(np.maximum(dx, dy), 0.0)
        return outer + inner

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        u = np.asarray(self.axis, dtype=np.float64)
        u = u / np.linalg.norm(u)
        ext = self.half_height * np.abs(u) + self.radius * np.sqrt(
            np.maximum(1.0 - u**2, 0.0)
        )
        return c - ext, c + ext


@dataclass(frozen=True)
class Superellipsoid:
    """|x/a|^p + |y/b|^p + |z/c|^p = 1 shell, radial distance approximation."""

    center: np.ndarray
    half_extents: np.ndarray
    exponent: float = 3.0

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        e = np.asarray(self.half_extents, dtype=np.float64)
        rel = (pts - c) / e
        p = self.exponent
        m = np.sum(np.abs(rel) ** p, axis=-1) ** (1.0 / p)
        r = np.linalg.norm(pts - c, axis=-1)
        # radial gap to the m==1 shell; sign from m, exact
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(m > 0, r * (1.0 - 1.0 / np.maximum(m, 1e-300)), -np.min(e))
        return d

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        e = np.asarray(self.half_extents, dtype=np.float64)
        return c - e, c + e


PRIMITIVE_KINDS = {
    "sphere": Sphere,
    "box": Box,
    "capsule": Capsule,
    "cylinder": Cylinder,
    "superellipsoid": Superellipsoid,
}


def check_in_domain(prim, margin: float = 0.0) -> None:
    lo, hi = prim.bounds()
    if np.any(lo < -1.0 + margin) or np.any(hi > 1.0 - margin):
        raise DomainError(
            f"primitive bounds [{lo}, {hi}] exceed the domain (margin {margin})"
        )


def analytic_sdf(prim, R: int) -> SdfGrid:
    """Voxelize an analytic primitive at resolution R. Errors if it leaves the domain."""
    if R < 8:
        raise ValueError(f"R must be >= 8, got {R}")
    check_in_domain(prim)
    return grid_from_function(prim.sdf, R)
