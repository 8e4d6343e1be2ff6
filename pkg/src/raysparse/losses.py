"""Set matching and training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .heads import DetectionOutput
from .objects import ObjectGT


def huber(x: torch.Tensor, beta: float) -> torch.Tensor:
    """Soft L1: quadratic below ``beta``, ``|x| - beta / 2`` above."""
    a = x.abs()
    return torch.where(a < beta, 0.5 * x * x / beta, a - 0.5 * beta)


def wrap_angle(x: torch.Tensor) -> torch.Tensor:
    """Angles to (-pi, pi]; the gradient is that of the identity."""
    return x - 2 * math.pi * torch.ceil((x - math.pi) / (2 * math.pi)).detach()


@dataclass
class GTTensors:
    category: torch.Tensor  # (G,) long
    center: torch.Tensor  # (G, 3)
    log_scale: torch.Tensor  # (G, 3)
    yaw: torch.Tensor  # (G,)
    shape: torch.Tensor  # (G, S, S, S) float

    @classmethod
    def from_objects(cls, objects: Sequence[ObjectGT], shape_size: int, dtype=torch.float32) -> "GTTensors":
        if not objects:
            return cls(
                torch.zeros(0, dtype=torch.long),
                torch.zeros(0, 3, dtype=dtype),
                torch.zeros(0, 3, dtype=dtype),
                torch.zeros(0, dtype=dtype),
                torch.zeros(0, shape_size, shape_size, shape_size, dtype=dtype),
            )
        return cls(
            torch.tensor([o.category for o in objects], dtype=torch.long),
            torch.tensor(np.stack([o.center for o in objects]), dtype=dtype),
            torch.tensor(np.log(np.stack([o.scale for o in objects])), dtype=dtype),
            torch.tensor([o.yaw for o in objects], dtype=dtype),
            torch.tensor(np.stack([o.shape for o in objects]), dtype=dtype),
        )

    def __len__(self) -> int:
        return int(self.category.shape[0])


def matching_cost(pred: DetectionOutput, gt: GTTensors, weights: LossWeights) -> torch.Tensor:
    """``(Q, G)`` cost of assigning each ground-truth object to each slot.

    The shape term is left out; it would require decoding every slot.
    """
    prob = pred.logits.softmax(-1)[:, gt.category]
    center = huber(pred.center[:, None] - gt.center[None], weights.center_beta).sum(-1)
    scale = (pred.log_scale[:, None] - gt.log_scale[None]).abs().sum(-1)
    rotation = huber(wrap_angle(pred.yaw[:, None] - gt.yaw[None]), weights.yaw_beta)
    return -weights.cls * prob + weights.center * center + weights.scale * scale + weights.rotation * rotation


@dataclass
class Assignment:
    """``slot_to_gt[q]`` is the ground-truth index for slot ``q`` or -1 for padding."""

    slot_to_gt: np.ndarray

    @property
    def slots(self) -> np.ndarray:
        return np.nonzero(self.slot_to_gt >= 0)[0]

    @property
    def gts(self) -> np.ndarray:
        return self.slot_to_gt[self.slots]


def hungarian_match(cost) -> Assignment:
    """Minimum-cost injective assignment of the columns (objects) to rows (slots)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n_slots, n_gt = cost.shape
    if n_gt > n_slots:
        raise ValueError(f"{n_gt} objects exceed the {n_slots} query slots")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    slot_to_gt = np.full(n_slots, -1, dtype=np.int64)
    if n_gt:
        rows, cols = linear_sum_assignment(cost)
        slot_to_gt[rows] = cols
    return Assignment(slot_to_gt)


@dataclass
class DetectionLoss:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)  # name -> float, summed over layers
    assignments: list = field(default_factory=list)


def layer_loss(
    pred: DetectionOutput,
    gt: GTTensors,
    assignment: Assignment,
    weights: LossWeights,
    shape_logits: torch.Tensor | None,
) -> dict:
    n_slots, n_classes = pred.logits.shape
    slots = torch.as_tensor(assignment.slots, dtype=torch.long)
    gts = torch.as_tensor(assignment.gts, dtype=torch.long)
    target = torch.full((n_slots,), n_classes - 1, dtype=torch.long)
    target[slots] = gt.category[gts]
    class_weight = torch.ones(n_classes, dtype=pred.logits.dtype)
    class_weight[-1] = weights.padding
    terms = {"cls": F.cross_entropy(pred.logits, target, weight=class_weight)}
    n = max(len(gt), 1)
    zero = pred.center.sum() * 0
    if len(slots):
        terms["center"] = huber(pred.center[slots] - gt.center[gts], weights.center_beta).sum() / n
        terms["scale"] = (pred.log_scale[slots] - gt.log_scale[gts]).abs().sum() / n
        terms["rotation"] = huber(wrap_angle(pred.yaw[slots] - gt.yaw[gts]), weights.yaw_beta).sum() / n
        if shape_logits is not None:
            bce = F.binary_cross_entropy_with_logits(shape_logits, gt.shape[gts], reduction="none")
            terms["shape"] = bce.flatten(1).mean(1).sum() / n
        else:
            terms["shape"] = zero
    else:
        terms.update(center=zero, scale=zero, rotation=zero, shape=zero)
    return terms


def detection_loss(
    layers: Sequence[DetectionOutput],
    gt: GTTensors,
    weights: LossWeights,
    decode_shapes=None,
) -> DetectionLoss:
    """Match every decoder layer separately and sum the weighted terms over layers.

    ``decode_shapes`` maps slot features to shape logits; it is only called
    for matched slots. Without it the shape term is zero.
    """
    total = 0.0
    summary = {k: 0.0 for k in ("cls", "center", "scale", "rotation", "shape")}
    assignments = []
    for pred in layers:
        with torch.no_grad():
            assignment = hungarian_match(matching_cost(pred, gt, weights).cpu().numpy())
        assignments.append(assignment)
        shapes = None
        if decode_shapes is not None and len(assignment.slots):
            shapes = decode_shapes(pred.features[torch.as_tensor(assignment.slots)])
        terms = layer_loss(pred, gt, assignment, weights, shapes)
        total = total + (
            weights.cls * terms["cls"]
            + weights.center * terms["center"]
            + weights.scale * terms["scale"]
            + weights.rotation * terms["rotation"]
            + weights.shape * terms["shape"]
        )
        for k, v in terms.items():
            summary[k] += float(v.detach())
    return DetectionLoss(total, summary, assignments)


def occupancy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def segmentation_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, masks.to(logits.dtype))
