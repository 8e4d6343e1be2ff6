"""Alignment accuracy and box detection scores.

Alignment accuracy counts a ground-truth object as found when a prediction of
the same category is within the translation, rotation and scale thresholds
simultaneously. Rotation is compared as a wrapped yaw difference; symmetric
objects get no special treatment.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .objects import wrap_angle
from .shapes import OrientedBox, oriented_box


@dataclass(frozen=True)
class Thresholds:
    translation: float = 0.20  # meters
    rotation_deg: float = 20.0
    scale: float = 0.20  # relative
    scale_mode: str = "max"  # or "mean" over axes

    def scaled(self, factor: float) -> "Thresholds":
        return replace(
            self,
            translation=self.translation * factor,
            rotation_deg=self.rotation_deg * factor,
            scale=self.scale * factor,
        )


RELAXED = Thresholds(0.40, 40.0, 0.40)


def pose_errors(pred, gt, scale_mode: str = "max") -> tuple[float, float, float]:
    """Translation (m), wrapped yaw (deg) and relative scale error between two posed objects."""
    translation = float(np.linalg.norm(pred.center - gt.center))
    rotation = abs(math.degrees(float(wrap_angle(pred.yaw - gt.yaw))))
    rel = np.abs(np.asarray(pred.scale) / np.asarray(gt.scale) - 1)
    if scale_mode == "max":
        scale = float(rel.max())
    elif scale_mode == "mean":
        scale = float(rel.mean())
    else:
        raise ValueError(f"unknown scale mode {scale_mode!r}")
    return translation, rotation, scale


def match_poses(preds: Sequence, gts: Sequence, thresholds: Thresholds = Thresholds()) -> np.ndarray:
    """Per ground-truth object, the index of the prediction that claims it (-1 if none).

    Candidate pairs share a category and pass all three thresholds; they are
    taken greedily in order of increasing translation error, each prediction
    and each ground-truth object at most once.
    """
    candidates = []
    for g, gt in enumerate(gts):
        for p, pred in enumerate(preds):
            if pred.category != gt.category:
                continue
            t, r, s = pose_errors(pred, gt, thresholds.scale_mode)
            if t <= thresholds.translation and r <= thresholds.rotation_deg and s <= thresholds.scale:
                candidates.append((t, g, p))
    candidates.sort(key=lambda c: c[0])
    owner = np.full(len(gts), -1, dtype=np.int64)
    used = set()
    for _, g, p in candidates:
        if owner[g] < 0 and p not in used:
            owner[g] = p
            used.add(p)
    return owner


@dataclass
class AccuracyReport:
    per_category: dict  # category id -> accuracy
    class_average: float
    global_average: float
    n_gt: int
    n_matched: int
    gt_per_category: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        d["gt_per_category"] = {str(k): v for k, v in self.gt_per_category.items()}
        return d


def pose_accuracy(scenes: Sequence[tuple[Sequence, Sequence]], thresholds: Thresholds = Thresholds()) -> AccuracyReport:
    """Accuracy over a list of ``(predictions, ground_truth)`` scenes.

    The class average runs over categories that occur in the ground truth.
    """
    found: dict = {}
    total: dict = {}
    for preds, gts in scenes:
        owner = match_poses(preds, gts, thresholds)
        for gt, p in zip(gts, owner):
            total[gt.category] = total.get(gt.category, 0) + 1
            found[gt.category] = found.get(gt.category, 0) + int(p >= 0)
    per_category = {c: found[c] / total[c] for c in sorted(total)}
    n_gt = sum(total.values())
    n_matched = sum(found.values())
    return AccuracyReport(
        per_category=per_category,
        class_average=float(np.mean(list(per_category.values()))) if per_category else 0.0,
        global_average=n_matched / n_gt if n_gt else 0.0,
        n_gt=n_gt,
        n_matched=n_matched,
        gt_per_category={c: total[c] for c in sorted(total)},
    )


def box_iou(a: OrientedBox, b: OrientedBox, n_samples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo IoU from uniform samples in the bounding box of both boxes."""
    lo_a, hi_a = a.aabb()
    lo_b, hi_b = b.aabb()
    if np.any(hi_a <= lo_b) or np.any(hi_b <= lo_a):
        return 0.0
    lo, hi = np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(n_samples, 3))
    in_a, in_b = a.contains(pts), b.contains(pts)
    union = np.count_nonzero(in_a | in_b)
    return float(np.count_nonzero(in_a & in_b) / union) if union else 0.0


@dataclass
class DetectionScores:
    precision: float
    recall: float
    f1: float
    true_positives: int
    n_predictions: int
    n_gt: int


def match_boxes(preds: Sequence, gts: Sequence, iou_threshold: float, **iou_kw) -> list[tuple[int, int, float]]:
    """Greedy same-category matching by decreasing IoU, keeping pairs at or above the threshold."""
    pairs = []
    for p, pred in enumerate(preds):
        for g, gt in enumerate(gts):
            if pred.category == gt.category:
                iou = box_iou(oriented_box(pred), oriented_box(gt), **iou_kw)
                if iou >= iou_threshold and iou > 0:
                    pairs.append((iou, p, g))
    pairs.sort(key=lambda x: -x[0])
    used_p, used_g, out = set(), set(), []
    for iou, p, g in pairs:
        if p not in used_p and g not in used_g:
            used_p.add(p)
            used_g.add(g)
            out.append((p, g, iou))
    return out


def detection_prf(scenes: Sequence[tuple[Sequence, Sequence]], iou_threshold: float = 0.5, **iou_kw) -> DetectionScores:
    tp = n_pred = n_gt = 0
    for preds, gts in scenes:
        tp += len(match_boxes(preds, gts, iou_threshold, **iou_kw))
        n_pred += len(preds)
        n_gt += len(gts)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return DetectionScores(precision, recall, f1, tp, n_pred, n_gt)


def threshold_sweep(scenes, factors=np.linspace(0.25, 2.0, 8), base: Thresholds = Thresholds()) -> list[dict]:
    """Accuracy with all three thresholds scaled together by each factor."""
    rows = []
    for f in factors:
        t = base.scaled(float(f))
        r = pose_accuracy(scenes, t)
        rows.append(
            {
                "factor": float(f),
                "translation": t.translation,
                "rotation_deg": t.rotation_deg,
                "scale": t.scale,
                "class_average": r.class_average,
                "global_average": r.global_average,
            }
        )
    return rows


def write_sweep_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
