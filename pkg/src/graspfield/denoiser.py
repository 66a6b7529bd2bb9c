"""A tiny dense velocity network with hand-written backprop.

Input is the noisy latent, a rescaled-time embedding, and a condition
vector; output is a velocity estimate of the same dimension as the
latent. Training is plain gradient descent with norm clipping: a
pretrain phase regresses the flow-matching target, an optional finetune
phase adds time-weighted penetration and contact penalties through the
decoded clean estimate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .grids import SdfGrid
from .latent import (FlowConfig, LinearCodec, ShapeLibrary, decode,
                     noise_scale, target_velocity)
from .objectives import contact_loss, ni_loss, time_weight, warmup
from .touch import TouchTensor

__all__ = [
    "TinyDenoiser", "FinetuneScene", "TrainingDivergence", "time_embedding",
    "train_denoiser", "denoiser_velocity", "save_denoiser", "load_denoiser",
]

_TDNZ_MAGIC = b"TDNZ"
_EMBED_FREQS = (1.0, 0.1, 0.01, 0.001)
EMBED_DIM = 1 + 2 * len(_EMBED_FREQS)


class TrainingDivergence(RuntimeError):
    pass


def time_embedding(tau: float) -> np.ndarray:
    """Raw rescaled time plus sin/cos at four fixed frequencies."""
    feats = [tau]
    for w in _EMBED_FREQS:
        feats.append(np.sin(tau * w))
        feats.append(np.cos(tau * w))
    return np.array(feats)


@dataclass
class TinyDenoiser:
    weights: List[Tuple[np.ndarray, np.ndarray]]  # [(W, b)] per layer
    k: int
    cond_dim: int
    alpha: float
    feature_scale: float = 1.0  # latent magnitudes normalized in and out

    @property
    def widths(self) -> List[int]:
        return [self.weights[0][0].shape[1]] + [W.shape[0] for W, _ in self.weights]

    @classmethod
    def init(cls, k: int, cond_dim: int, hidden=(64, 64), alpha: float = 1000.0,
             feature_scale: float = 1.0,
             rng: Optional[np.random.Generator] = None) -> "TinyDenoiser":
        rng = rng or np.random.default_rng(0)
        sizes = [k + EMBED_DIM + cond_dim] + list(hidden) + [k]
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
            b = np.zeros(fan_out)
            weights.append((W, b))
        return cls(weights, k, cond_dim, alpha, feature_scale)

    def _input(self, x: np.ndarray, t: float, cond: Optional[np.ndarray]) -> np.ndarray:
        if cond is None:
            cond = np.zeros(self.cond_dim)
        cond = np.asarray(cond, dtype=np.float64).reshape(-1)
        if cond.size != self.cond_dim:
            raise ValueError(f"condition length {cond.size} != {self.cond_dim}")
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.size != self.k:
            raise ValueError(f"latent length {x.size} != {self.k}")
        fs = self.feature_scale
        emb = time_embedding(self.alpha * t)
        # the raw-tau entry would otherwise dwarf every other feature and
        # its weight-gradient column with it; feed it back in unit range
        emb[0] /= self.alpha
        return np.concatenate([x / fs, emb, cond / fs])

    def forward(self, x: np.ndarray, t: float,
                cond: Optional[np.ndarray] = None) -> np.ndarray:
        a = self._input(x, t, cond)
        for i, (W, b) in enumerate(self.weights):
            a = W @ a + b
            if i < len(self.weights) - 1:
                a = np.tanh(a)
        return a * self.feature_scale

    def forward_cached(self, x: np.ndarray, t: float,
                       cond: Optional[np.ndarray] = None):
        """Forward pass keeping pre/post activations for backprop."""
        a = self._input(x, t, cond)
        acts = [a]
        for i, (W, b) in enumerate(self.weights):
            z = W @ a + b
            a = np.tanh(z) if i < len(self.weights) - 1 else z
            acts.append(a)
        return acts[-1] * self.feature_scale, acts

    def backward(self, acts, gout: np.ndarray):
        """Gradients of a scalar loss w.r.t. weights, given d loss/d output."""
        grads = []
        delta = np.asarray(gout, dtype=np.float64) * self.feature_scale
        for i in reversed(range(len(self.weights))):
            W, _ = self.weights[i]
            a_in = acts[i]
            if i < len(self.weights) - 1:
                delta = delta * (1.0 - acts[i + 1] ** 2)  # through tanh
            gW = np.outer(delta, a_in)
            gb = delta.copy()
            grads.append((gW, gb))
            delta = W.T @ delta
        grads.reverse()
        return grads


@dataclass
class FinetuneScene:
    """One physics supervision case: a target latent in a grasp context."""
    x0: np.ndarray
    hand: SdfGrid
    touch: TouchTensor
    cond: Optional[np.ndarray] = None


def _zero_like_weights(den: TinyDenoiser):
    return [(np.zeros_like(W), np.zeros_like(b)) for W, b in den.weights]


def _accumulate(total, grads, coeff=1.0):
    for (tW, tb), (gW, gb) in zip(total, grads):
        tW += coeff * gW
        tb += coeff * gb


def _clip_and_step(den: TinyDenoiser, grads, lr: float, clip: float) -> float:
    norm_sq = sum(float((gW ** 2).sum() + (gb ** 2).sum()) for gW, gb in grads)
    norm = np.sqrt(norm_sq)
    scale = min(1.0, clip / max(norm, 1e-12))
    for (W, b), (gW, gb) in zip(den.weights, grads):
        W -= lr * scale * gW
        b -= lr * scale * gb
    return norm


def train_denoiser(lib: ShapeLibrary, codec: Optional[LinearCodec],
                   config: FlowConfig,
                   scenes: Optional[List[FinetuneScene]] = None,
                   conds: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None,
                   hidden=(64, 64), log_path=None, log_every: int = 50):
    """Pretrain on the library, then optionally finetune on grasp scenes.

    ``conds`` optionally pairs each library entry with a conditioning
    vector (shape (N, k)); without it the model trains unconditionally
    and converges toward the mixture field. Finetuning requires the codec
    (the physics terms act on decoded clean estimates) and at least one
    scene. Returns (denoiser, log records).
    """
    rng = rng or np.random.default_rng(0)
    cond_dim = lib.k
    if conds is not None:
        conds = np.asarray(conds, dtype=np.float64)
        if conds.shape != (len(lib), cond_dim):
            raise ValueError(f"conds shape {conds.shape} != "
                             f"({len(lib)}, {cond_dim})")
    # latents inherit raw grid magnitudes; normalize so the tanh layers
    # neither saturate on input nor crawl toward large outputs
    fs = max(1.0, float(np.sqrt((lib.latents ** 2).mean())))
    den = TinyDenoiser.init(lib.k, cond_dim, hidden=hidden, alpha=config.alpha,
                            feature_scale=fs, rng=rng)
    records = []

    def log(step, fm, ni, c):
        total = fm + ni + c
        if total > config.divergence_limit or not np.isfinite(total):
            raise TrainingDivergence(
                f"loss {total:.3e} exceeded {config.divergence_limit:.0e} "
                f"at step {step}")
        rec = {"step": step, "fm": fm, "ni": ni, "c": c, "total": total}
        records.append(rec)

    sm = config.sigma_min
    for step in range(config.steps):
        grads = _zero_like_weights(den)
        fm_total = 0.0
        for _ in range(config.batch):
            i = rng.choice(len(lib), p=lib.weights)
            x0 = lib.latents[i]
            eps = rng.standard_normal(lib.k)
            t = rng.uniform(0.0, 1.0)
            xt = (1 - t) * x0 + noise_scale(t, sm) * eps
            cond = None if conds is None else conds[i]
            out, acts = den.forward_cached(xt, t, cond)
            resid = out - target_velocity(x0, eps, sm)
            fm_total += float((resid ** 2).sum())
            _accumulate(grads, den.backward(acts, 2.0 * resid / config.batch))
        _clip_and_step(den, grads, config.lr, config.clip_norm)
        if step % log_every == 0 or step == config.steps - 1:
            log(step, fm_total / config.batch, 0.0, 0.0)

    if config.finetune_steps > 0:
        if not scenes:
            raise ValueError("finetune requested but no scenes provided")
        if codec is None:
            raise ValueError("finetune requires the codec")
        for step in range(config.finetune_steps):
            lam_ni = warmup(config.lam_ni, config.ni_warmup_steps, step)
            grads = _zero_like_weights(den)
            fm_total = 0.0
            phys = []  # (w, ni, c, acts, d_phys/d_out)
            w_sum = 0.0
            for _ in range(config.batch):
                sc = scenes[rng.integers(0, len(scenes))]
                x0 = np.asarray(sc.x0, dtype=np.float64)
                eps = rng.standard_normal(lib.k)
                t = rng.uniform(0.0, 1.0)
                s = noise_scale(t, sm)
                xt = (1 - t) * x0 + s * eps
                out, acts = den.forward_cached(xt, t, sc.cond)
                resid = out - target_velocity(x0, eps, sm)
                fm_total += float((resid ** 2).sum())
                _accumulate(grads, den.backward(acts, 2.0 * resid / config.batch))

                denom = s + (1 - sm) * (1 - t)
                x0_hat = ((1 - sm) * xt - s * out) / denom
                rec_grid = decode(codec, x0_hat)
                v_ni, g_ni = ni_loss(rec_grid, sc.hand, config.tau)
                v_c, g_c = contact_loss(rec_grid, sc.touch.C)
                w = time_weight(t)
                grid_grad = lam_ni * g_ni + config.lam_c * g_c
                z_grad = codec.basis.T @ grid_grad.ravel()
                phys.append((w, v_ni, v_c, acts, (-s / denom) * z_grad))
                w_sum += w
            ni_red = sum(w * v for w, v, _, _, _ in phys) / max(1e-12, w_sum)
            c_red = sum(w * v for w, _, v, _, _ in phys) / max(1e-12, w_sum)
            for w, _, _, acts, dout in phys:
                _accumulate(grads, den.backward(acts, dout),
                            coeff=w / max(1e-12, w_sum))
            _clip_and_step(den, grads, config.lr, config.clip_norm)
            if step % log_every == 0 or step == config.finetune_steps - 1:
                log(config.steps + step, fm_total / config.batch,
                    lam_ni * ni_red, config.lam_c * c_red)

    if log_path is not None:
        with open(log_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return den, records


def denoiser_velocity(den: TinyDenoiser, cond: Optional[np.ndarray] = None):
    """Adapt a denoiser to the velocity-field callable shape (x, t) -> v."""
    def vf(x, t):
        return den.forward(x, t, cond)
    return vf


def save_denoiser(den: TinyDenoiser, path) -> None:
    """TDNZ file: magic, u32 layer count, u32 k, u32 cond_dim, f64 alpha,
    f64 feature scale, then per layer u32 rows, u32 cols, f64 W row-major,
    f64 b."""
    with open(path, "wb") as fh:
        fh.write(_TDNZ_MAGIC)
        fh.write(struct.pack("<III", len(den.weights), den.k, den.cond_dim))
        fh.write(struct.pack("<dd", den.alpha, den.feature_scale))
        for W, b in den.weights:
            rows, cols = W.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(W.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_denoiser(path) -> TinyDenoiser:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _TDNZ_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    n_layers, k, cond_dim = struct.unpack_from("<III", raw, 4)
    alpha, feature_scale = struct.unpack_from("<dd", raw, 16)
    off = 32
    weights = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", raw, off)
        off += 8
        W = np.frombuffer(raw, dtype="<f8", count=rows * cols,
                          offset=off).reshape(rows, cols).copy()
        off += 8 * rows * cols
        b = np.frombuffer(raw, dtype="<f8", count=rows, offset=off).copy()
        off += 8 * rows
        weights.append((W, b))
    return TinyDenoiser(weights, k, cond_dim, alpha, feature_scale)
