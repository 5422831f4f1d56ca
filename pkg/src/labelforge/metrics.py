"""Evaluation metrics: per-class IOU / mIOU, PCK with the visible-keypoint
bounding-box threshold, masked normalized MSE for depth, and center-cropped
clamped RMSE / RMSE-log."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_CLAMP_LO = 0.001
DEPTH_CLAMP_HI = 80.0


@dataclass
class SegScore:
    per_class: np.ndarray  # (n_classes,), NaN where the class is absent from both masks
    miou: float


@dataclass
class DepthScore:
    mnmse: float
    rmse: float
    rmse_log: float


def iou(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> SegScore:
    """Per-class intersection over union. Classes absent from both masks are
    undefined (NaN) and excluded from the mean."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if p.size and (p.max() >= n_classes or t.max() >= n_classes):
        raise ValueError(f"class index >= n_classes ({n_classes})")
    per = np.full(n_classes, np.nan)
    for c in range(n_classes):
        pc = p == c
        tc = t == c
        union = np.logical_or(pc, tc).sum()
        if union == 0:
            continue
        per[c] = np.logical_and(pc, tc).sum() / union
    return SegScore(per, float(np.nanmean(per)))


def pck(
    pred_xy: np.ndarray,
    true_xy: np.ndarray,
    visible: np.ndarray,
    alpha: float,
) -> float:
    """Fraction of visible keypoints within alpha * max(h, w) of the truth,
    where (h, w) is the bounding box of the visible true keypoints. Distance
    exactly equal to the threshold counts as correct."""
    pxy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    txy = np.asarray(true_xy, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if len(pxy) != len(txy) or len(pxy) != len(vis):
        raise ValueError("keypoint count mismatch")
    if not vis.any():
        raise ValueError("PCK undefined with zero visible keypoints")
    t = txy[vis]
    h = t[:, 1].max() - t[:, 1].min()
    w = t[:, 0].max() - t[:, 0].min()
    threshold = alpha * max(h, w)
    dist = np.linalg.norm(pxy[vis] - t, axis=1)
    return float((dist <= threshold).mean())


def mnmse(pred: np.ndarray, truth: np.ndarray, valid: np.ndarray) -> float:
    """Normalized mean-squared error over valid (non-corrupted) pixels."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    v = np.asarray(valid, dtype=bool)
    if p.shape != t.shape or p.shape != v.shape:
        raise ValueError("shape mismatch between pred, truth, valid")
    if not v.any():
        raise ValueError("empty valid set")
    denom = float((t[v] ** 2).sum())
    if denom == 0.0:
        raise ValueError("truth is zero on every valid pixel")
    return float(((p[v] - t[v]) ** 2).sum()) / denom


def _center_crop(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    ch, cw = h // 2, w // 2
    r0 = (h - ch) // 2
    c0 = (w - cw) // 2
    return a[r0 : r0 + ch, c0 : c0 + cw]


def rmse_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(rmse, rmse_log) over the centered half-height, half-width crop, with
    depths clamped into [0.001, 80] (truth clamped too, keeping logs finite)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim != 2 or min(p.shape) < 2:
        raise ValueError(f"need a grid of at least 2x2, got {p.shape}")
    pc = np.clip(_center_crop(p), DEPTH_CLAMP_LO, DEPTH_CLAMP_HI)
    tc = np.clip(_center_crop(t), DEPTH_CLAMP_LO, DEPTH_CLAMP_HI)
    rmse = float(np.sqrt(((pc - tc) ** 2).mean()))
    rmse_log = float(np.sqrt(((np.log(pc) - np.log(tc)) ** 2).mean()))
    return rmse, rmse_log
