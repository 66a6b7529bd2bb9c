"""Reconstruction and pose metrics with occlusion-stratified reporting.

All geometric metrics operate in grid domain units. Chamfer uses the
squared-distance convention; ADD-S is asymmetric (ground truth against
the prediction) and its thresholded variant normalizes by the ground
truth bounding-box diagonal. Point sampling is seeded, so every value
is reproducible bit for bit.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .grids import SdfGrid
from .meshing import (TriMesh, extract_surface, sample_surface_points,
                      sample_surface_with_normals)

EXACT_EMD_LIMIT = 256


def _points(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty point set")
    return P


def chamfer(P, Q) -> float:
    """Symmetric mean of squared nearest-neighbor distances."""
    P, Q = _points(P), _points(Q)
    d_pq = cKDTree(Q).query(P)[0]
    d_qp = cKDTree(P).query(Q)[0]
    return 0.5 * (float(np.mean(d_pq ** 2)) + float(np.mean(d_qp ** 2)))


def normal_consistency(mesh_a: TriMesh, mesh_b: TriMesh, n: int = 10000,
                       seed: int = 0) -> float:
    """Mean |cos| between sampled normals and their nearest counterparts."""
    pa, na = sample_surface_with_normals(mesh_a, n, seed)
    pb, nb = sample_surface_with_normals(mesh_b, n, seed)
    idx_ab = cKDTree(pb).query(pa)[1]
    idx_ba = cKDTree(pa).query(pb)[1]
    cos_ab = np.abs(np.sum(na * nb[idx_ab], axis=1))
    cos_ba = np.abs(np.sum(nb * na[idx_ba], axis=1))
    return 0.5 * (float(cos_ab.mean()) + float(cos_ba.mean()))


def fscore(P, Q, thresh: float = 0.02) -> float:
    """Harmonic mean of precision and recall at a distance threshold."""
    P, Q = _points(P), _points(Q)
    precision = float(np.mean(cKDTree(Q).query(P)[0] <= thresh))
    recall = float(np.mean(cKDTree(P).query(Q)[0] <= thresh))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def voxel_iou(A: SdfGrid, B: SdfGrid) -> float:
    if A.resolution != B.resolution:
        raise ValueError("resolution mismatch")
    a = A.values < 0
    b = B.values < 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0  # two empty occupancies agree perfectly
    return int(np.count_nonzero(a & b)) / union


def _sinkhorn_cost(C: np.ndarray, eps_final: float, tol: float,
                   max_iter: int) -> float:
    n = C.shape[0]
    log_w = -np.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    eps = max(float(C.mean()), eps_final)
    schedule = []
    while eps > eps_final:
        schedule.append(eps)
        eps /= 2.0
    schedule.append(eps_final)
    for eps in schedule:
        for _ in range(max_iter):
            M = (g[None, :] - C) / eps + log_w
            f = -eps * _logsumexp_rows(M)
            M = (f[:, None] - C) / eps + log_w
            g = -eps * _logsumexp_rows(M.T)
            # the g update fixes columns exactly; rows measure convergence
            plan_log = (f[:, None] + g[None, :] - C) / eps + 2 * log_w
            row = np.exp(plan_log).sum(axis=1)
            if np.abs(row - 1.0 / n).sum() < tol:
                break
    plan = np.exp((f[:, None] + g[None, :] - C) / eps + 2 * log_w)
    return float((plan * C).sum())


def _logsumexp_rows(M: np.ndarray) -> np.ndarray:
    m = M.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(M - m).sum(axis=1, keepdims=True))).ravel()


def emd(P, Q, mode: str = "auto", reg: float = 0.005, tol: float = 1e-9,
        max_iter: int = 2000) -> float:
    """Mean transport distance under the optimal pairing.

    Exact assignment up to 256 points, entropic approximation beyond
    (regularization relative to the mean pair cost, annealed).
    """
    P, Q = _points(P), _points(Q)
    if len(P) != len(Q):
        raise ValueError(f"point counts differ ({len(P)} vs {len(Q)})")
    if mode not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown mode {mode!r}")
    C = cdist(P, Q)
    if mode == "exact" or (mode == "auto" and len(P) <= EXACT_EMD_LIMIT):
        rows, cols = linear_sum_assignment(C)
        return float(C[rows, cols].mean())
    scale = float(C.mean())
    if scale == 0.0:
        return 0.0
    # plan marginals are 1/n, so the plan cost is already the mean distance
    return _sinkhorn_cost(C, reg * scale, tol, max_iter)


def aabb(points) -> tuple:
    P = _points(points)
    return P.min(axis=0), P.max(axis=0)


def iou3d(box_a, box_b) -> float:
    """Overlap ratio of two axis-aligned boxes given as (lo, hi) pairs."""
    lo_a, hi_a = (np.asarray(v, dtype=np.float64) for v in box_a)
    lo_b, hi_b = (np.asarray(v, dtype=np.float64) for v in box_b)
    if (hi_a < lo_a).any() or (hi_b < lo_b).any():
        raise ValueError("malformed box")
    inter = np.maximum(0.0, np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b))
    vi = float(np.prod(inter))
    va = float(np.prod(hi_a - lo_a))
    vb = float(np.prod(hi_b - lo_b))
    union = va + vb - vi
    if union == 0:
        return 1.0
    return vi / union


def adds(pred_points, gt_points) -> float:
    """Mean distance from ground-truth points to the nearest prediction."""
    pred, gt = _points(pred_points), _points(gt_points)
    return float(cKDTree(pred).query(gt)[0].mean())


def adds_at(pred_points, gt_points, ratio: float = 0.1) -> float:
    """1.0 when ADD-S is within ratio of the ground-truth box diagonal."""
    gt = _points(gt_points)
    lo, hi = gt.min(axis=0), gt.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    if diameter == 0:
        raise ValueError("degenerate ground truth extent")
    return 1.0 if adds(pred_points, gt) <= ratio * diameter else 0.0


def icp_rot(pred_points, gt_points, max_iter: int = 50,
            tol: float = 1e-6) -> float:
    """Residual rotation (degrees) after point-to-point ICP from identity."""
    pred, gt = _points(pred_points), _points(gt_points)
    tree = cKDTree(gt)
    R = np.eye(3)
    t = np.zeros(3)
    prev = np.inf
    for _ in range(max_iter):
        cur = pred @ R.T + t
        d, idx = tree.query(cur)
        mse = float(np.mean(d ** 2))
        if prev - mse <= tol * max(prev, 1e-12) and np.isfinite(prev):
            break
        prev = mse
        target = gt[idx]
        cp = pred.mean(axis=0)
        ct = target.mean(axis=0)
        H = (pred - cp).T @ (target - ct)
        U, _, Vt = np.linalg.svd(H)
        D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(Vt.T @ U.T)))])
        R = Vt.T @ D @ U.T
        t = ct - R @ cp
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


@dataclass
class EvalSample:
    pred: SdfGrid
    gt: SdfGrid
    bin: int
    valid: bool = True


METRIC_KEYS = ("cd", "nc", "fscore", "viou", "emd", "iou3d",
               "adds", "adds_at", "icp_rot_deg")


def evaluate_sample(sample: EvalSample, n_points: int = 10000,
                    emd_points: int = 128, seed: int = 0,
                    fscore_thresh: float = 0.02) -> dict:
    """All metric values for one sample; marks it invalid when the
    prediction has no extractable surface."""
    row = {"bin": int(sample.bin), "valid": bool(sample.valid)}
    if not row["valid"]:
        return row
    try:
        pred_mesh = extract_surface(sample.pred)
        gt_mesh = extract_surface(sample.gt)
    except ValueError:
        row["valid"] = False
        return row
    pp = sample_surface_points(pred_mesh, n_points, seed)
    gp = sample_surface_points(gt_mesh, n_points, seed)
    pe = sample_surface_points(pred_mesh, emd_points, seed + 1)
    ge = sample_surface_points(gt_mesh, emd_points, seed + 1)
    row.update({
        "cd": chamfer(pp, gp),
        "nc": normal_consistency(pred_mesh, gt_mesh, n=n_points, seed=seed),
        "fscore": fscore(pp, gp, fscore_thresh),
        "viou": voxel_iou(sample.pred, sample.gt),
        "emd": emd(pe, ge),
        "iou3d": iou3d(aabb(pp), aabb(gp)),
        "adds": adds(pp, gp),
        "adds_at": adds_at(pp, gp),
        "icp_rot_deg": icp_rot(pe, ge),
    })
    return row


@dataclass
class StratifiedReport:
    metrics: Dict[str, Dict[str, float]]  # name -> {"B1".."BK", "All"}
    counts: Dict[str, int]                # "B1".."BK", "All"
    K: int = 5

    def bin_labels(self) -> List[str]:
        return [f"B{i}" for i in range(1, self.K + 1)]

    def to_csv(self, path) -> None:
        labels = self.bin_labels()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric"] + labels + ["All"])
            for name in sorted(self.metrics):
                vals = self.metrics[name]
                w.writerow([name] + [repr(vals[b]) for b in labels]
                           + [repr(vals["All"])])
            w.writerow(["counts"] + [self.counts[b] for b in labels]
                       + [self.counts["All"]])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"metrics": self.metrics, "counts": self.counts,
                       "bins": self.K}, fh, indent=1)


def stratified_report(rows: List[dict], K: int = 5) -> StratifiedReport:
    """Aggregate per-sample metric rows into per-bin and overall means.

    Rows carry "bin", "valid", and metric values; invalid rows count for
    nothing. The overall column is the mean over all valid samples,
    which equals the count-weighted mean of the bins.
    """
    valid = [r for r in rows if r.get("valid", False)]
    if not valid:
        raise ValueError("no valid samples to report")
    names = sorted(set(k for r in valid for k in r)
                   - {"bin", "valid"})
    labels = [f"B{i}" for i in range(1, K + 1)]
    counts = {lab: 0 for lab in labels}
    for r in valid:
        b = int(r["bin"])
        if not 1 <= b <= K:
            raise ValueError(f"bin {b} outside 1..{K}")
        counts[f"B{b}"] += 1
    counts["All"] = len(valid)
    metrics = {}
    for name in names:
        per = {}
        for i, lab in enumerate(labels, start=1):
            vals = [r[name] for r in valid if int(r["bin"]) == i]
            per[lab] = float(np.mean(vals)) if vals else float("nan")
        per["All"] = float(np.mean([r[name] for r in valid]))
        metrics[name] = per
    return StratifiedReport(metrics, counts, K)
