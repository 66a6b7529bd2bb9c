"""Procedural grasp scenes at desk scale.

A scene pairs one primitive object with a multi-finger capsule hand
whose fingertips rest tangent on the object surface. Scenes are
canonicalized into the padded grid, voxelized, validated (at least one
contact, no interpenetration), rendered to orthographic masks, and
binned by occlusion fraction. Every build is deterministic in the seed.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .grids import SdfGrid, load_sdfg, save_sdfg
from .objectives import ni_loss
from .primitives import Box, Capsule, Cylinder, Sphere, Superellipsoid
from .touch import (ContactSet, TouchTensor, build_touch_tensor,
                    extract_contacts, load_touch, save_touch)
from .transforms import (GridFrame, SimilarityTransform, canonicalize_scene,
                         random_rotation, transformed_analytic)


class GenerationError(RuntimeError):
    """Raised when the rejection sampler runs out of retries."""


_OBJECT_KINDS = ("sphere", "box", "capsule", "cylinder", "superellipsoid")


@dataclass
class SceneConfig:
    resolution: int = 64
    mask_size: int = 128          # pixels, must be a multiple of resolution
    bins: int = 5
    padding_voxels: int = 2
    metric_scale: float = 0.15
    n_fingers_choices: Tuple[int, ...] = (3, 4, 5)
    object_kinds: Tuple[str, ...] = _OBJECT_KINDS
    sphere_radius: Tuple[float, float] = (0.25, 0.45)
    box_half: Tuple[float, float] = (0.18, 0.38)
    capsule_half: Tuple[float, float] = (0.2, 0.4)
    capsule_radius: Tuple[float, float] = (0.12, 0.25)
    cylinder_half: Tuple[float, float] = (0.2, 0.4)
    cylinder_radius: Tuple[float, float] = (0.15, 0.3)
    superell_half: Tuple[float, float] = (0.22, 0.4)
    superell_exponent: Tuple[float, float] = (2.5, 4.0)
    tip_radius: Tuple[float, float] = (0.04, 0.06)
    contact_gap: float = 0.01     # surface separation left at the fingertips
    max_attempts: int = 40

    def validate(self) -> None:
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        if self.mask_size % self.resolution != 0:
            raise ValueError("mask_size must be a multiple of resolution")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.padding_voxels < 0:
            raise ValueError("padding_voxels must be >= 0")
        unknown = set(self.object_kinds) - set(_OBJECT_KINDS)
        if unknown:
            raise ValueError(f"unknown object kinds {sorted(unknown)}")
        for name in ("sphere_radius", "box_half", "capsule_half",
                     "capsule_radius", "cylinder_half", "cylinder_radius",
                     "superell_half", "superell_exponent", "tip_radius"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range ({lo}, {hi}) invalid")
        if not set(self.n_fingers_choices) <= {3, 4, 5}:
            raise ValueError("finger counts limited to 3, 4, 5")


@dataclass(frozen=True)
class _RoundedSlab:
    """Oriented box with rounded edges; axes are the rows of `axes`."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray
    radius: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        local = (np.atleast_2d(pts) - self.center) @ self.axes.T
        q = np.abs(local) - self.half_extents
        outer = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inner = np.minimum(q.max(axis=-1), 0.0)
        out = outer + inner - self.radius
        return out if np.asarray(pts).ndim > 1 else out[0]

    def bounds(self):
        reach = np.abs(self.axes.T) @ self.half_extents + self.radius
        return self.center - reach, self.center + reach


@dataclass(frozen=True)
class ProcObject:
    kind: str
    primitive: object
    pose: SimilarityTransform
    metric_scale: float = 0.15

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return transformed_analytic(self.primitive, self.pose)(pts)

    def bounds(self):
        lo, hi = self.primitive.bounds()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        mapped = self.pose.apply(corners)
        return mapped.min(axis=0), mapped.max(axis=0)

    @property
    def center(self) -> np.ndarray:
        return self.pose.apply(np.zeros((1, 3)))[0]


@dataclass(frozen=True)
class FingerChain:
    points: np.ndarray   # (n_joints+2, 3): base, joints..., tip
    radii: np.ndarray    # one per segment

    def __post_init__(self):
        if len(self.points) < 2 or len(self.radii) != len(self.points) - 1:
            raise ValueError("chain needs n+1 points for n segment radii")
        if not (np.asarray(self.radii) > 0).all():
            raise ValueError("chain radii must be positive")

    def capsules(self) -> List[Capsule]:
        return [Capsule(self.points[i], self.points[i + 1], float(r))
                for i, r in enumerate(self.radii)]

    @property
    def tip(self) -> np.ndarray:
        return self.points[-1]


@dataclass(frozen=True)
class ProcHand:
    fingers: Tuple[FingerChain, ...]
    palm: _RoundedSlab

    def __post_init__(self):
        if len(self.fingers) not in (3, 4, 5):
            raise ValueError("hand needs 3, 4, or 5 fingers")

    @property
    def n_fingers(self) -> int:
        return len(self.fingers)

    @property
    def fingertips(self) -> np.ndarray:
        return np.stack([f.tip for f in self.fingers])

    def parts(self):
        out: List[object] = [self.palm]
        for f in self.fingers:
            out.extend(f.capsules())
        return out

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        vals = [np.atleast_1d(p.sdf(np.atleast_2d(pts)))
                for p in self.parts()]
        out = np.minimum.reduce(vals)
        return out if np.asarray(pts).ndim > 1 else out[0]

    def bounds(self):
        los, his = zip(*(p.bounds() for p in self.parts()))
        return np.min(los, axis=0), np.max(his, axis=0)


def _draw(rng, lo_hi) -> float:
    return float(rng.uniform(*lo_hi))


def sample_object(rng: np.random.Generator,
                  config: Optional[SceneConfig] = None) -> ProcObject:
    """Draw a primitive from the configured ranges and pose it."""
    config = config or SceneConfig()
    config.validate()
    kind = str(rng.choice(list(config.object_kinds)))
    if kind == "sphere":
        prim = Sphere(np.zeros(3), _draw(rng, config.sphere_radius))
    elif kind == "box":
        prim = Box(np.zeros(3), rng.uniform(*config.box_half, size=3))
    elif kind == "capsule":
        half = _draw(rng, config.capsule_half)
        prim = Capsule(np.array([0.0, 0.0, -half]), np.array([0.0, 0.0, half]),
                       _draw(rng, config.capsule_radius))
    elif kind == "cylinder":
        prim = Cylinder(np.zeros(3), np.array([0.0, 0.0, 1.0]),
                        _draw(rng, config.cylinder_half),
                        _draw(rng, config.cylinder_radius))
    else:
        prim = Superellipsoid(np.zeros(3),
                              rng.uniform(*config.superell_half, size=3),
                              _draw(rng, config.superell_exponent))
    pose = SimilarityTransform(1.0, random_rotation(rng),
                               rng.uniform(-0.06, 0.06, size=3))
    obj = ProcObject(kind, prim, pose, config.metric_scale)
    lo, hi = obj.bounds()
    if (lo < -1.0).any() or (hi > 1.0).any():
        raise GenerationError(f"object bounds [{lo}, {hi}] leave the domain")
    return obj


def _surface_root(sdf: Callable, origin: np.ndarray, direction: np.ndarray,
                  hi: float = 1.6, steps: int = 48) -> Optional[float]:
    """Smallest u > 0 with sdf(origin + u*dir) = 0, or None."""
    us = np.linspace(0.0, hi, steps + 1)
    vals = sdf(origin[None, :] + us[:, None] * direction[None, :])
    sign = np.sign(vals)
    idx = np.nonzero(sign[:-1] * sign[1:] <= 0)[0]
    if idx.size == 0:
        return None
    lo_u, hi_u = us[idx[0]], us[idx[0] + 1]
    for _ in range(60):
        mid = 0.5 * (lo_u + hi_u)
        if sdf((origin + mid * direction)[None, :])[0] < 0:
            lo_u = mid
        else:
            hi_u = mid
    return 0.5 * (lo_u + hi_u)


def _sdf_normal(sdf: Callable, p: np.ndarray, step: float = 1e-5) -> np.ndarray:
    g = np.zeros(3)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = step
        g[ax] = (sdf((p + e)[None, :])[0] - sdf((p - e)[None, :])[0]) / (2 * step)
    n = np.linalg.norm(g)
    if n == 0:
        raise GenerationError("degenerate surface normal")
    return g / n


def _segment_clear(sdf: Callable, a: np.ndarray, b: np.ndarray, radius: float,
                   clearance: float, samples: int = 16) -> bool:
    ts = np.linspace(0.0, 1.0, samples)[:, None]
    pts = a[None, :] * (1 - ts) + b[None, :] * ts
    return bool((sdf(pts) >= radius + clearance).all())


def _orthonormal_frame(axis: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0])
    if abs(axis @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


def sample_grasp(obj: ProcObject, n_fingers: int, rng: np.random.Generator,
                 config: Optional[SceneConfig] = None) -> ProcHand:
    """Place a capsule-chain hand with fingertips tangent on the object.

    Fingertip centers land one tip radius (plus a small configured gap)
    off the surface along the outward normal, so capsules touch without
    sinking in. Retries with fresh approach directions until the whole
    hand clears the object; raises after the retry budget.
    """
    config = config or SceneConfig()
    config.validate()
    if n_fingers not in (3, 4, 5):
        raise ValueError("n_fingers must be 3, 4, or 5")
    sdf = obj.sdf
    center = obj.center
    # superellipsoid distances are only radially approximate; leave more room
    pad = 1.3 if obj.kind == "superellipsoid" else 1.0

    for _ in range(config.max_attempts):
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        e1, e2 = _orthonormal_frame(a)
        r_tip = _draw(rng, config.tip_radius)
        gap = config.contact_gap * pad
        spread = np.deg2rad(rng.uniform(55.0, 80.0))
        psi0 = rng.uniform(0.0, 2 * np.pi)
        tips = []
        ok = True
        for f in range(n_fingers):
            psi = psi0 + 2 * np.pi * f / n_fingers \
                + np.deg2rad(rng.uniform(-5.0, 5.0))
            u = (np.cos(spread) * a
                 + np.sin(spread) * (np.cos(psi) * e1 + np.sin(psi) * e2))
            root = _surface_root(sdf, center, u)
            if root is None:
                ok = False
                break
            p_surf = center + root * u
            n_hat = _sdf_normal(sdf, p_surf)
            tips.append(p_surf + (r_tip * pad + gap) * n_hat)
        if not ok:
            continue

        palm_root = _surface_root(sdf, center, a)
        if palm_root is None:
            continue
        standoff = rng.uniform(0.28, 0.4)
        palm_center = center + (palm_root + standoff) * a
        palm = _RoundedSlab(palm_center, np.stack([e1, e2, a]),
                            np.array([0.22, 0.22, 0.04]), 0.02)

        fingers = []
        for f, tip in enumerate(tips):
            psi = psi0 + 2 * np.pi * f / n_fingers
            base = palm_center - 0.05 * a \
                + 0.18 * (np.cos(psi) * e1 + np.sin(psi) * e2)
            mid = 0.5 * (base + tip)
            out_dir = mid - center
            nrm = np.linalg.norm(out_dir)
            out_dir = out_dir / nrm if nrm > 0 else a
            r_prox = r_tip * 1.2
            joint = None
            for bulge in np.linspace(0.0, 0.45, 10):
                cand = mid + bulge * out_dir
                if (_segment_clear(sdf, base, cand, r_prox, gap)
                        and _segment_clear(sdf, cand, tip, r_tip, -0.25 * gap)):
                    joint = cand
                    break
            if joint is None:
                break
            fingers.append(FingerChain(np.stack([base, joint, tip]),
                                       np.array([r_prox, r_tip])))
        if len(fingers) != n_fingers:
            continue

        lo, hi = palm.bounds()
        if (sdf(np.array([lo, hi, palm_center])) < gap).any():
            continue
        hand = ProcHand(tuple(fingers), palm)
        lo, hi = hand.bounds()
        if (lo < -1.0).any() or (hi > 1.0).any():
            continue
        return hand
    raise GenerationError(
        f"no valid grasp in {config.max_attempts} attempts")


def render_masks(obj: SdfGrid, hand: Optional[SdfGrid], W: int):
    """Orthographic masks along +z: (full, visible, hand).

    Masks are (W, W) uint8 in [row=y, col=x] order; depth is the first
    occupied slab from the z=-1 side. `full` ignores occlusion; `visible`
    and `hand` are front-most masks with depth ties going to the hand,
    so the two never overlap.
    """
    R = obj.resolution
    if W % R != 0:
        raise ValueError("W must be a multiple of the grid resolution")
    occ_o = obj.values < 0
    full = occ_o.any(axis=0)
    depth_o = np.where(full, occ_o.argmax(axis=0), R)
    if hand is None:
        occ_h = np.zeros_like(occ_o)
    else:
        if hand.resolution != R:
            raise ValueError("resolution mismatch")
        occ_h = hand.values < 0
    m_h = occ_h.any(axis=0)
    depth_h = np.where(m_h, occ_h.argmax(axis=0), R)
    visible = full & (~m_h | (depth_o < depth_h))
    hand_vis = m_h & (~full | (depth_h <= depth_o))
    s = W // R
    up = np.ones((s, s), dtype=np.uint8)
    return (np.kron(full.astype(np.uint8), up),
            np.kron(visible.astype(np.uint8), up),
            np.kron(hand_vis.astype(np.uint8), up))


@dataclass(frozen=True)
class SpriteMeta:
    """Pixel placement of a voxel-space bounding box on a square canvas."""

    bbox_xy: Tuple[int, int, int, int]  # (ix0, iy0, ix1, iy1), half open
    resolution: int
    canvas: int

    def __post_init__(self):
        if self.canvas % self.resolution != 0:
            raise ValueError("canvas must be a multiple of resolution")
        x0, y0, x1, y1 = self.bbox_xy
        R = self.resolution
        if not (0 <= x0 < x1 <= R and 0 <= y0 < y1 <= R):
            raise ValueError(f"bbox {self.bbox_xy} outside [0, {R}]^2")

    @property
    def s_px(self) -> int:
        return self.canvas // self.resolution


def sprite_place(mask: np.ndarray, bbox_xy, R: int, W: int) -> np.ndarray:
    """Crop a binary mask tight, rescale uniformly, paste into a pixel box.

    The box is the voxel bbox scaled by W/R; the crop keeps its aspect
    ratio (nearest neighbor) and is centered in the box on a zero canvas.
    """
    meta = SpriteMeta(tuple(int(v) for v in bbox_xy), R, W)
    mask = np.asarray(mask)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        raise ValueError("empty mask has no sprite")
    crop = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    ch, cw = crop.shape
    x0, y0, x1, y1 = meta.bbox_xy
    s = meta.s_px
    box_w, box_h = (x1 - x0) * s, (y1 - y0) * s
    scale = min(box_w / cw, box_h / ch)
    out_w = max(1, int(np.floor(cw * scale)))
    out_h = max(1, int(np.floor(ch * scale)))
    ri = np.minimum((np.arange(out_h) / scale).astype(int), ch - 1)
    ci = np.minimum((np.arange(out_w) / scale).astype(int), cw - 1)
    resized = crop[np.ix_(ri, ci)]
    canvas = np.zeros((W, W), dtype=np.uint8)
    oy = y0 * s + (box_h - out_h) // 2
    ox = x0 * s + (box_w - out_w) // 2
    canvas[oy:oy + out_h, ox:ox + out_w] = (resized > 0).astype(np.uint8)
    return canvas


def occlusion_bin(m_visible: np.ndarray, m_full: np.ndarray, K: int = 5):
    """Hidden-area fraction and its equal-width bin in {1..K}."""
    full = int(np.count_nonzero(m_full))
    if full == 0:
        raise ValueError("object mask is empty")
    x = 1.0 - np.count_nonzero(m_visible) / full
    return x, min(K, int(np.floor(x * K)) + 1)


@dataclass
class GraspScene:
    object_sdf: SdfGrid
    hand_sdf: SdfGrid
    contacts: ContactSet
    touch: TouchTensor
    m_o_full: np.ndarray
    m_o_visible: np.ndarray
    m_h: np.ndarray
    frame: GridFrame
    occlusion_x: float
    bin: int
    meta: dict = field(default_factory=dict)


def margin_ok(grid: SdfGrid, p: int) -> bool:
    """No occupied voxel within p layers of any domain face."""
    neg = grid.values < 0
    R = grid.resolution
    if not neg.any():
        return False
    idx = np.nonzero(neg)
    return all(int(i.min()) >= p and int(i.max()) <= R - 1 - p for i in idx)


def build_scene(rng: np.random.Generator,
                config: Optional[SceneConfig] = None) -> GraspScene:
    """Generate, canonicalize, voxelize, validate, and bin one scene."""
    config = config or SceneConfig()
    config.validate()
    R = config.resolution
    h = 2.0 / R
    last = "no attempt"
    for _ in range(config.max_attempts):
        obj = sample_object(rng, config)
        n_fingers = int(rng.choice(list(config.n_fingers_choices)))
        try:
            hand = sample_grasp(obj, n_fingers, rng, config)
        except GenerationError as err:
            last = str(err)
            continue
        xf, hand_grid, obj_grid = canonicalize_scene(
            hand, obj, hand.fingertips, config.padding_voxels, R)
        ni = ni_loss(obj_grid, hand_grid, 0.1)[0]
        if ni > 1e-6:
            last = f"interpenetration {ni:.2e}"
            continue
        contacts = extract_contacts(hand_grid, obj_grid, band=h)
        if len(contacts) == 0:
            last = "no contacts"
            continue
        if not (margin_ok(obj_grid, config.padding_voxels)
                and margin_ok(hand_grid, config.padding_voxels)):
            last = "margin violated"
            continue
        touch = build_touch_tensor(contacts, R)
        m_full, m_vis, m_h = render_masks(obj_grid, hand_grid,
                                          config.mask_size)
        x, b = occlusion_bin(m_vis, m_full, config.bins)
        frame = GridFrame(metric_scale=config.metric_scale)
        meta = {
            "object_kind": obj.kind,
            "n_fingers": n_fingers,
            "canonical_scale": xf.scale,
            "canonical_translation": list(xf.translation),
            "resolution": R,
            "mask_size": config.mask_size,
            "bins": config.bins,
        }
        return GraspScene(obj_grid, hand_grid, contacts, touch,
                          m_full, m_vis, m_h, frame, x, b, meta)
    raise GenerationError(f"scene build exhausted retries ({last})")


def scene_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-scene stream from (master seed, scene index)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, index)))


def save_pgm(mask: np.ndarray, path) -> None:
    """Binary mask to 8-bit PGM (P5), nonzero mapped to 255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    hgt, wid = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{wid} {hgt}\n255\n".encode())
        fh.write(((mask > 0) * np.uint8(255)).tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM")
    wid, hgt = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=wid * hgt)
    return (data.reshape(hgt, wid) > 127).astype(np.uint8)


def save_scene(scene: GraspScene, directory) -> None:
    """Scene bundle: JSON metadata, four SDFG grids, three PGM masks."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    doc = {
        "occlusion_x": scene.occlusion_x,
        "bin": scene.bin,
        "metric_scale": scene.frame.metric_scale,
        "contacts": {
            "points": scene.contacts.points.tolist(),
            "source_finger": scene.contacts.source_finger.tolist(),
        },
        "meta": scene.meta,
    }
    (d / "scene.json").write_text(json.dumps(doc, indent=1))
    save_sdfg(scene.object_sdf, d / "object.sdfg")
    save_sdfg(scene.hand_sdf, d / "hand.sdfg")
    save_touch(scene.touch, d / "touch_C.sdfg", d / "touch_D.sdfg")
    save_pgm(scene.m_o_full, d / "mask_object_full.pgm")
    save_pgm(scene.m_o_visible, d / "mask_object_visible.pgm")
    save_pgm(scene.m_h, d / "mask_hand.pgm")


def load_scene(directory) -> GraspScene:
    d = Path(directory)
    doc = json.loads((d / "scene.json").read_text())
    contacts = ContactSet(np.asarray(doc["contacts"]["points"],
                                     dtype=np.float64).reshape(-1, 3),
                          np.asarray(doc["contacts"]["source_finger"],
                                     dtype=np.int64))
    return GraspScene(
        object_sdf=load_sdfg(d / "object.sdfg"),
        hand_sdf=load_sdfg(d / "hand.sdfg"),
        contacts=contacts,
        touch=load_touch(d / "touch_C.sdfg", d / "touch_D.sdfg"),
        m_o_full=load_pgm(d / "mask_object_full.pgm"),
        m_o_visible=load_pgm(d / "mask_object_visible.pgm"),
        m_h=load_pgm(d / "mask_hand.pgm"),
        frame=GridFrame(metric_scale=doc["metric_scale"]),
        occlusion_x=doc["occlusion_x"],
        bin=doc["bin"],
        meta=doc["meta"],
    )
