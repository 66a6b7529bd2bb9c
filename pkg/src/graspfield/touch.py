"""Contact extraction and the two-channel touch tensor.

Contacts are voxel centers where the hand and object surfaces meet,
thinned to one representative per connected blob. The conditioning
tensor pairs a binary contact-occupancy grid C with D, the exact
Euclidean distance to the nearest contact voxel, measured in voxel
steps. With no contacts D saturates at the full grid diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grids import DomainError, GridMismatchError, SdfGrid, voxel_centers
from .transforms import GridFrame

__all__ = [
    "ContactSet", "TouchTensor", "touch_sentinel", "extract_contacts",
    "build_touch_tensor", "perturb_contacts", "save_touch", "load_touch",
]


@dataclass(frozen=True)
class ContactSet:
    points: np.ndarray        # (n, 3) float64, may be empty
    source_finger: np.ndarray  # (n,) int64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        fid = np.asarray(self.source_finger, dtype=np.int64).reshape(-1)
        if len(pts) != len(fid):
            raise ValueError("points and source_finger length mismatch")
        if len(pts) and np.abs(pts).max() > 1.0:
            raise DomainError("contact points must lie in [-1,1]^3")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source_finger", fid)

    def __len__(self):
        return len(self.points)


def touch_sentinel(resolution: int) -> float:
    """D value meaning "no contact anywhere": the grid diagonal in voxel units."""
    return float(np.sqrt(3.0) * (resolution - 1))


@dataclass(frozen=True)
class TouchTensor:
    C: np.ndarray  # (R,R,R) uint8, [iz,iy,ix]
    D: np.ndarray  # (R,R,R) float64, voxel units

    def __post_init__(self):
        C = np.ascontiguousarray(self.C, dtype=np.uint8)
        D = np.ascontiguousarray(self.D, dtype=np.float64)
        if C.shape != D.shape or C.ndim != 3 or len(set(C.shape)) != 1:
            raise ValueError(f"C/D must be matching cubes, got {C.shape} vs {D.shape}")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def resolution(self) -> int:
        return self.C.shape[0]

    @property
    def has_contacts(self) -> bool:
        return bool(self.C.any())


def extract_contacts(hand: SdfGrid, obj: SdfGrid, band: float) -> ContactSet:
    """Voxels where both surfaces pass within `band`, one point per blob.

    Each 6-connected component of the dual-band mask contributes the voxel
    center minimizing |S_hand| + |S_object| (the tightest dual fit).
    Finger ids are component ordinals; scene generation relabels them by
    nearest fingertip.
    """
    if hand.resolution != obj.resolution:
        raise GridMismatchError(
            f"resolution mismatch {hand.resolution} vs {obj.resolution}")
    mask = (np.abs(hand.values) < band) & (np.abs(obj.values) < band)
    if not mask.any():
        return ContactSet(np.empty((0, 3)), np.empty(0, dtype=np.int64))
    labels, n = ndimage.label(mask)
    score = np.abs(hand.values) + np.abs(obj.values)
    c = voxel_centers(hand.resolution)
    pts = np.empty((n, 3))
    for k in range(1, n + 1):
        sel = labels == k
        flat = np.where(sel.ravel(), score.ravel(), np.inf)
        iz, iy, ix = np.unravel_index(np.argmin(flat), mask.shape)
        pts[k - 1] = (c[ix], c[iy], c[iz])
    return ContactSet(pts, np.arange(n, dtype=np.int64))


def _contact_voxels(contacts: ContactSet, resolution: int) -> np.ndarray:
    h = 2.0 / resolution
    idx = np.floor((contacts.points + 1.0) / h).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def build_touch_tensor(contacts: ContactSet, resolution: int) -> TouchTensor:
    """Rasterize contacts into C and take the exact distance transform."""
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    C = np.zeros((resolution,) * 3, dtype=np.uint8)
    if len(contacts):
        idx = _contact_voxels(contacts, resolution)
        C[idx[:, 2], idx[:, 1], idx[:, 0]] = 1
        # edt measures each zero... nonzero voxel's distance to the nearest
        # zero voxel, so feed the complement of C
        D = ndimage.distance_transform_edt(C == 0, sampling=1.0)
        D = np.asarray(D, dtype=np.float64)
    else:
        D = np.full((resolution,) * 3, touch_sentinel(resolution))
    return TouchTensor(C, D)


def perturb_contacts(contacts: ContactSet, sigma_mm: float, frame: GridFrame,
                     rng: np.random.Generator) -> ContactSet:
    """Offset each contact by a uniform-in-ball vector of radius sigma_mm.

    The radius converts through frame.metric_scale (meters per domain
    unit). Draw order is fixed per point, so rerunning with the same seed
    and a larger sigma scales every displacement along the same direction.
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be nonnegative")
    if len(contacts) == 0 or sigma_mm == 0:
        return ContactSet(contacts.points.copy(), contacts.source_finger.copy())
    radius = (sigma_mm / 1000.0) / frame.metric_scale
    n = len(contacts)
    raw = rng.standard_normal((n, 3))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    dirs = raw / norms
    mags = rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)
    moved = contacts.points + radius * mags * dirs
    return ContactSet(np.clip(moved, -1.0, 1.0), contacts.source_finger.copy())


# ---------------------------------------------------------------------------
# serialization: a pair of SDFG volumes tagged by channel

def save_touch(t: TouchTensor, c_path, d_path) -> None:
    from .grids import save_sdfg
    save_sdfg(SdfGrid(t.resolution, t.C.astype(np.float64)), c_path,
              channel_dtype="u1")
    save_sdfg(SdfGrid(t.resolution, t.D), d_path, channel_dtype="f4")


def load_touch(c_path, d_path) -> TouchTensor:
    from .grids import load_sdfg
    cg = load_sdfg(c_path, channel_dtype="u1")
    dg = load_sdfg(d_path)
    if cg.resolution != dg.resolution:
        raise GridMismatchError("C and D volumes disagree on resolution")
    return TouchTensor(cg.values.astype(np.uint8), dg.values)
