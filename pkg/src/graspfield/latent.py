"""Latent codec and flow-matching machinery.

The codec is a truncated-SVD linear map between SDF grids and K-vectors,
so the guidance chain rule is exact: decode is affine with constant
Jacobian equal to the basis. On top of it live the noising interpolation,
its regression target, the closed-form mixture-oracle velocity for a
finite shape library, evidence-based reweighting of that library, and
the touch fusion that augments a hand latent with pooled contact
features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .grids import SdfGrid
from .touch import TouchTensor, touch_sentinel
from .grids import voxel_centers

__all__ = [
    "LinearCodec", "ShapeLibrary", "FlowConfig", "fit_codec", "encode",
    "decode", "save_codec", "load_codec", "interpolate", "target_velocity",
    "oracle_velocity", "condition_library", "TouchFuser", "pool_touch",
    "fuse_touch", "fm_loss", "library_from_grids",
]

_CODC_MAGIC = b"CODC"


@dataclass(frozen=True)
class LinearCodec:
    mean: np.ndarray   # (N,) with N = R^3
    basis: np.ndarray  # (N, K), columns orthonormal
    resolution: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        basis = np.asarray(self.basis, dtype=np.float64)
        R = self.resolution
        if mean.size != R ** 3 or basis.shape[0] != R ** 3:
            raise ValueError("codec dimensions do not match resolution")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)

    @property
    def k(self) -> int:
        return self.basis.shape[1]


def fit_codec(grids, k: int) -> LinearCodec:
    """Mean plus top-k left singular directions of the centered stack."""
    if not grids:
        raise ValueError("need at least one grid")
    R = grids[0].resolution
    for g in grids:
        if g.resolution != R:
            raise ValueError("mixed resolutions in codec fit")
    X = np.stack([g.values.ravel() for g in grids], axis=1)  # (N, count)
    if k > min(len(grids), X.shape[0]):
        raise ValueError(f"k={k} exceeds min(count, R^3) = "
                         f"{min(len(grids), X.shape[0])}")
    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    U, _, _ = np.linalg.svd(Xc, full_matrices=False)
    return LinearCodec(mean, U[:, :k], R)


def encode(codec: LinearCodec, grid: SdfGrid) -> np.ndarray:
    if grid.resolution != codec.resolution:
        raise ValueError("grid resolution does not match codec")
    return codec.basis.T @ (grid.values.ravel() - codec.mean)


def decode(codec: LinearCodec, z: np.ndarray) -> SdfGrid:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != codec.k:
        raise ValueError(f"latent length {z.size} != codec k {codec.k}")
    R = codec.resolution
    vals = codec.mean + codec.basis @ z
    return SdfGrid(R, vals.reshape(R, R, R))


def save_codec(codec: LinearCodec, path) -> None:
    """CODC file: magic, u32 K, u32 N, f32 mean, f32 basis column-major."""
    N, K = codec.basis.shape
    with open(path, "wb") as fh:
        fh.write(_CODC_MAGIC + struct.pack("<II", K, N))
        fh.write(codec.mean.astype("<f4").tobytes())
        fh.write(codec.basis.astype("<f4").ravel(order="F").tobytes())


def load_codec(path) -> LinearCodec:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CODC_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    K, N = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * N * (K + 1)
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}")
    R = round(N ** (1.0 / 3.0))
    if R ** 3 != N:
        raise ValueError(f"{path}: payload size {N} is not a cube")
    off = 12
    mean = np.frombuffer(raw, dtype="<f4", count=N, offset=off).astype(np.float64)
    off += 4 * N
    flat = np.frombuffer(raw, dtype="<f4", count=N * K, offset=off)
    basis = flat.reshape((N, K), order="F").astype(np.float64)
    return LinearCodec(mean, basis, R)


# ---------------------------------------------------------------------------
# shape library and flow

@dataclass(frozen=True)
class ShapeLibrary:
    latents: np.ndarray   # (n, K)
    weights: np.ndarray   # (n,), normalized to sum 1
    sigma_min: float = 1e-3

    def __post_init__(self):
        lat = np.asarray(self.latents, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if lat.ndim != 2 or lat.shape[0] < 1:
            raise ValueError("library needs at least one latent entry")
        if len(w) != lat.shape[0]:
            raise ValueError("weights length does not match entries")
        if (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        if not np.isfinite(lat).all():
            raise ValueError("latent entries must be finite")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in [0,1)")
        object.__setattr__(self, "latents", lat)
        object.__setattr__(self, "weights", w / w.sum())

    def __len__(self):
        return self.latents.shape[0]

    @property
    def k(self) -> int:
        return self.latents.shape[1]


def library_from_grids(codec: LinearCodec, grids, weights=None,
                       sigma_min: float = 1e-3) -> ShapeLibrary:
    lat = np.stack([encode(codec, g) for g in grids])
    if weights is None:
        weights = np.full(len(grids), 1.0 / len(grids))
    return ShapeLibrary(lat, weights, sigma_min)


@dataclass(frozen=True)
class FlowConfig:
    sigma_min: float = 1e-3
    alpha: float = 1000.0       # time rescale fed to the denoiser embedding
    batch: int = 16
    lr: float = 5e-3
    steps: int = 2000
    finetune_steps: int = 0
    lam_ni: float = 1.0
    lam_c: float = 1.0
    tau: float = 0.1
    ni_warmup_steps: int = 200
    clip_norm: float = 10.0
    divergence_limit: float = 1e6

    def __post_init__(self):
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in [0,1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.batch < 1 or self.steps < 0 or self.finetune_steps < 0:
            raise ValueError("batch/steps out of range")


def noise_scale(t: float, sigma_min: float) -> float:
    return sigma_min + (1.0 - sigma_min) * t


def interpolate(x0: np.ndarray, eps: np.ndarray, t: float,
                sigma_min: float) -> np.ndarray:
    """Noising path x_t = (1-t) x0 + (sigma_min + (1-sigma_min) t) eps."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0,1], got {t}")
    return (1.0 - t) * np.asarray(x0) + noise_scale(t, sigma_min) * np.asarray(eps)


def target_velocity(x0: np.ndarray, eps: np.ndarray, sigma_min: float) -> np.ndarray:
    """d x_t / dt along the noising path: (1-sigma_min) eps - x0."""
    return (1.0 - sigma_min) * np.asarray(eps) - np.asarray(x0)


def oracle_velocity(x: np.ndarray, t: float, lib: ShapeLibrary) -> np.ndarray:
    """Exact marginal velocity of the finite-library mixture.

    The posterior over entries is a softmax of Gaussian log-likelihoods
    around each (1-t)-shrunk entry, evaluated with log-sum-exp so it stays
    finite far from the data.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0,1], got {t}")
    s = noise_scale(t, lib.sigma_min)
    if s <= 0.0:
        raise ValueError("singular time: t=0 with sigma_min=0")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = (1.0 - t) * lib.latents                   # (n, K)
    resid = x[None, :] - mu                        # (n, K)
    loglik = np.log(np.maximum(lib.weights, 1e-300)) \
        - (resid ** 2).sum(axis=1) / (2.0 * s * s)
    logp = loglik - logsumexp(loglik)
    p = np.exp(logp)
    per_entry = (1.0 - lib.sigma_min) * resid / s - lib.latents
    return p @ per_entry


def mixture_posterior(x: np.ndarray, t: float, lib: ShapeLibrary) -> np.ndarray:
    """Posterior p(entry | x, t); exposed for tests and diagnostics."""
    s = noise_scale(t, lib.sigma_min)
    if s <= 0.0:
        raise ValueError("singular time: t=0 with sigma_min=0")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    resid = x[None, :] - (1.0 - t) * lib.latents
    loglik = np.log(np.maximum(lib.weights, 1e-300)) \
        - (resid ** 2).sum(axis=1) / (2.0 * s * s)
    return np.exp(loglik - logsumexp(loglik))


def condition_library(lib: ShapeLibrary, mismatch_fn, strength: float = 1.0
                      ) -> ShapeLibrary:
    """Reweight entries by exp(-strength * mismatch), renormalized.

    mismatch_fn maps a latent entry (K,) to a nonnegative score; zero
    means perfect agreement with the evidence.
    """
    scores = np.array([float(mismatch_fn(z)) for z in lib.latents])
    if (scores < 0).any():
        raise ValueError("mismatch scores must be nonnegative")
    logw = np.log(np.maximum(lib.weights, 1e-300)) - strength * scores
    logw -= logw.max()
    w = np.exp(logw)
    if not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError("conditioning produced an all-zero weight vector")
    return ShapeLibrary(lib.latents, w / w.sum(), lib.sigma_min)


# ---------------------------------------------------------------------------
# touch fusion

TOUCH_FEATURE_DIM = 7


def pool_touch(t: TouchTensor) -> np.ndarray:
    """Pool a touch tensor to a fixed 7-vector.

    [has_contacts, voxel count / 64, centroid xyz (domain units),
     mean D / sentinel, rms contact spread]. The empty tensor maps to the
    constant (0, 0, 0, 0, 0, 1, 0): no contacts, saturated distance.
    """
    R = t.resolution
    sent = touch_sentinel(R)
    occ = np.argwhere(t.C > 0)  # (m, 3) as (iz, iy, ix)
    if len(occ) == 0:
        return np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    c = voxel_centers(R)
    pts = np.stack([c[occ[:, 2]], c[occ[:, 1]], c[occ[:, 0]]], axis=1)
    centroid = pts.mean(axis=0)
    spread = float(np.sqrt(((pts - centroid) ** 2).sum(axis=1).mean()))
    return np.array([1.0, len(occ) / 64.0, centroid[0], centroid[1],
                     centroid[2], float(t.D.mean()) / sent, spread])


@dataclass(frozen=True)
class TouchFuser:
    """Linear fusion out = W_hand @ hand + W_touch @ features, no bias.

    Identity initialization (W_hand = I, W_touch = 0) realizes the
    required reduction: with touch disabled the hand latent passes
    through bit-identically.
    """
    w_hand: np.ndarray   # (K, K)
    w_touch: np.ndarray  # (K, F)

    def __post_init__(self):
        wh = np.asarray(self.w_hand, dtype=np.float64)
        wt = np.asarray(self.w_touch, dtype=np.float64)
        if wh.ndim != 2 or wh.shape[0] != wh.shape[1]:
            raise ValueError("w_hand must be square")
        if wt.ndim != 2 or wt.shape[0] != wh.shape[0]:
            raise ValueError("w_touch rows must match latent dimension")
        object.__setattr__(self, "w_hand", wh)
        object.__setattr__(self, "w_touch", wt)

    @classmethod
    def identity(cls, k: int, feature_dim: int = TOUCH_FEATURE_DIM) -> "TouchFuser":
        return cls(np.eye(k), np.zeros((k, feature_dim)))


def fuse_touch(hand_latent: np.ndarray, touch: TouchTensor,
               fuser: TouchFuser) -> np.ndarray:
    hand_latent = np.asarray(hand_latent, dtype=np.float64).reshape(-1)
    if hand_latent.size != fuser.w_hand.shape[0]:
        raise ValueError("hand latent length does not match fuser")
    feats = pool_touch(touch)
    if feats.size != fuser.w_touch.shape[1]:
        raise ValueError("touch feature length does not match fuser")
    if not fuser.w_touch.any() and np.array_equal(fuser.w_hand,
                                                  np.eye(len(hand_latent))):
        return hand_latent  # exact reduction, no float round-trip
    return fuser.w_hand @ hand_latent + fuser.w_touch @ feats


def fuse_features(hand_latent: np.ndarray, feats: np.ndarray,
                  fuser: TouchFuser) -> np.ndarray:
    """Fusion entered at the feature level (tests exercise linearity here)."""
    return fuser.w_hand @ np.asarray(hand_latent) + fuser.w_touch @ np.asarray(feats)


def fm_loss(output: np.ndarray, x0: np.ndarray, eps: np.ndarray,
            sigma_min: float) -> float:
    """Squared distance to the flow-matching regression target."""
    diff = np.asarray(output) - target_velocity(x0, eps, sigma_min)
    return float((diff ** 2).sum())
