"""Counting metrics (MAE/RMSE) and normalized average precision for points."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class CountRecord:
    predicted: int
    ground_truth: int

    def __post_init__(self):
        if self.predicted < 0 or self.ground_truth < 0:
            raise MetricError("counts must be nonnegative")


@dataclass
class LocalizationRecord:
    """Per-image predictions (with scores) and ground-truth points."""

    pred_points: np.ndarray   # (P, 2)
    pred_scores: np.ndarray   # (P,)
    gt_points: np.ndarray     # (G, 2)


def mae_rmse(records: list[CountRecord]) -> tuple[float, float]:
    if not records:
        raise MetricError("no count records")
    errs = np.array([r.predicted - r.ground_truth for r in records], dtype=np.float64)
    return float(np.abs(errs).mean()), float(math.sqrt((errs ** 2).mean()))


def gt_sigmas(gt_points: np.ndarray, k: int = 3, fallback: float = 32.0) -> np.ndarray:
    """Per-point normalization radius: mean distance to the k nearest
    ground-truth neighbors in the same image, `fallback` when fewer exist."""
    g = len(gt_points)
    if g <= k:
        return np.full(g, fallback)
    d = np.linalg.norm(gt_points[:, None, :] - gt_points[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    nearest = np.sort(d, axis=1)[:, :k]
    return nearest.mean(axis=1)


def nap(records: list[LocalizationRecord], delta: float = 0.5) -> float:
    """Average precision for point predictions pooled across images.

    A prediction is a true positive if it falls within delta * sigma of a
    not-yet-matched ground-truth point in its own image (greedy in score
    order). AP integrates the precision envelope over recall.
    """
    if delta <= 0:
        raise MetricError("delta must be positive")
    total_gt = sum(len(r.gt_points) for r in records)
    if total_gt == 0:
        raise MetricError("no ground-truth points in any record")

    flags = []  # (score, is_tp) pooled across images
    for rec in records:
        order = np.argsort(-np.asarray(rec.pred_scores, dtype=np.float64), kind="stable")
        sigmas = gt_sigmas(np.asarray(rec.gt_points, dtype=np.float64))
        used = np.zeros(len(rec.gt_points), dtype=bool)
        for j in order:
            p = np.asarray(rec.pred_points[j], dtype=np.float64)
            best, best_d = -1, np.inf
            for g, gt in enumerate(rec.gt_points):
                if used[g]:
                    continue
                d = float(np.linalg.norm(p - gt))
                if d <= delta * sigmas[g] and d < best_d:
                    best, best_d = g, d
            if best >= 0:
                used[best] = True
                flags.append((float(rec.pred_scores[j]), True))
            else:
                flags.append((float(rec.pred_scores[j]), False))
    if not flags:
        return 0.0
    flags.sort(key=lambda t: -t[0])
    tps = np.cumsum([f[1] for f in flags])
    ranks = np.arange(1, len(flags) + 1)
    precision = tps / ranks
    recall = tps / total_gt
    # Precision envelope, integrated over recall (all-point interpolation).
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(prec_env, recall):
        ap += p * (r - prev_recall)
        prev_recall = r
    return float(ap)


def metrics_report(count_records: list[CountRecord],
                   loc_records: list[LocalizationRecord],
                   delta: float = 0.5) -> dict:
    """JSON-ready metrics summary."""
    mae, rmse = mae_rmse(count_records)
    return {
        "mae": mae,
        "rmse": rmse,
        "nap": nap(loc_records, delta),
        "n_images": len(count_records),
    }
