"""Voxel signed-distance fields for hand-object scenes.

Grids, analytic primitives, mesh round-trips, similarity augmentation,
touch tensors, flow-matching latents, guided sampling, scene synthesis,
and stratified evaluation. See README.md for the command line entry
points.
"""

__version__ = "0.1.0"

from .grids import (DomainError, EmptySurfaceError, GridMismatchError,
                    GradientField, SdfGrid, grid_from_function,
                    gradient_stencil, load_sdfg, sample_trilinear, save_sdfg,
                    sdf_min, voxel_centers)
from .primitives import (Box, Capsule, Cylinder, Sphere, Superellipsoid,
                         analytic_sdf)
from .transforms import (FeasibilityError, GridFrame, SimilarityTransform,
                         augment_sdf, canonicalize_scene, compose,
                         identity_transform, invert, random_rotation,
                         sample_augmentation)

__all__ = [
    "DomainError", "EmptySurfaceError", "GridMismatchError",
    "GradientField", "SdfGrid", "grid_from_function", "gradient_stencil",
    "load_sdfg", "sample_trilinear", "save_sdfg", "sdf_min", "voxel_centers",
    "Box", "Capsule", "Cylinder", "Sphere", "Superellipsoid", "analytic_sdf",
    "FeasibilityError", "GridFrame", "SimilarityTransform", "augment_sdf",
    "canonicalize_scene", "compose", "identity_transform", "invert",
    "random_rotation", "sample_augmentation",
    "__version__",
]
