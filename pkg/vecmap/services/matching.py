"""
Bipartite matching and the detector set loss.

This module provides:
- ElementTargets: GT labels and keypoints of one scene
- SetPrediction: the query outputs (logits, keypoints) the loss reads
- CostMatrix / Assignment: padded square costs and the optimal permutation
- hungarian: minimum-cost perfect matching (scipy linear_sum_assignment)
- smooth_l1 / pairwise_box_iou: loss components in numpy
- pairwise_match_cost: query x (GT + no-object padding) cost matrix
- detector_set_loss: differentiable set loss over a batch
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from vecmap.models.schemas import NO_OBJECT, KeypointRepr, VectorMap
from vecmap.numerics import tensor as T
from vecmap.numerics.tensor import Tensor
from vecmap.services.geometry import MIN_BOX_SIDE_M, extract_keypoints
from vecmap.utils.errors import InvalidMatrixError, MatchingError

logger = logging.getLogger(__name__)

CLASS_WEIGHT = 2.0
L1_WEIGHT = 0.1
IOU_WEIGHT = 1.0
NO_OBJECT_WEIGHT = 0.1


class SetPrediction(Protocol):
    """Query outputs the set loss consumes; the detector's DetectionSet satisfies it."""

    logits: Tensor
    keypoints: Tensor
    repr_kind: KeypointRepr

    @property
    def n_max(self) -> int: ...

    @property
    def batch_size(self) -> int: ...

    def log_probs(self) -> np.ndarray: ...

    def sample(self, b: int) -> "SetPrediction": ...


@dataclass(frozen=True)
class ElementTargets:
    """Ground-truth labels (M,) and keypoints (M, k, 2) in meters."""

    labels: np.ndarray
    keypoints: np.ndarray
    repr_kind: KeypointRepr

    @property
    def num(self) -> int:
        return len(self.labels)

    @classmethod
    def from_map(cls, vmap: VectorMap, repr_kind: KeypointRepr) -> "ElementTargets":
        """Extract keypoints of every element."""
        labels = np.array([e.label.index for e in vmap.elements], dtype=np.int64)
        kps = [extract_keypoints(e.polyline, repr_kind).array() for e in vmap.elements]
        keypoints = np.stack(kps) if kps else np.zeros((0, repr_kind.k, 2))
        return cls(labels=labels, keypoints=keypoints, repr_kind=repr_kind)


@dataclass(frozen=True)
class CostMatrix:
    """Square cost matrix; columns >= num_real are no-object padding."""

    entries: np.ndarray
    num_real: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise InvalidMatrixError(f"cost matrix must be square, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise InvalidMatrixError("cost matrix has non-finite entries")
        object.__setattr__(self, "entries", e)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class Assignment:
    """Row i (query) is assigned column permutation[i] (target or padding)."""

    permutation: Tuple[int, ...]
    cost: float

    def query_for(self, column: int) -> int:
        """Row assigned to a column."""
        return self.permutation.index(column)

    def matched_queries(self, num_real: int) -> np.ndarray:
        """Query index for each real target column, in column order."""
        inverse = np.argsort(np.asarray(self.permutation))
        return inverse[:num_real]


def hungarian(c) -> Assignment:
    """
    Minimum-cost perfect matching.

    Args:
        c: CostMatrix or square array

    Returns:
        Globally optimal Assignment
    """
    if not isinstance(c, CostMatrix):
        c = CostMatrix(entries=np.asarray(c, dtype=np.float64), num_real=len(c))
    rows, cols = linear_sum_assignment(c.entries)
    permutation = np.empty(c.size, dtype=np.int64)
    permutation[rows] = cols
    cost = float(c.entries[rows, cols].sum())
    return Assignment(permutation=tuple(int(p) for p in permutation), cost=cost)


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """
    Mean smooth-L1 over coordinates.

    Args:
        pred: Predicted values
        target: Target values (same length)
        beta: Quadratic-to-linear transition point

    Returns:
        mean(0.5 d^2 / beta if |d| < beta else |d| - 0.5 beta)
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 length mismatch: {pred.size} vs {target.size}")
    d = np.abs(pred - target)
    return float(np.mean(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)))


def _boxes(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Floored enclosing boxes of (..., k, 2) keypoints."""
    lo, hi = points.min(axis=-2), points.max(axis=-2)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, MIN_BOX_SIDE_M / 2.0)
    return center - half, center + half


def pairwise_box_iou(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """
    IoU of enclosing boxes for every (pred, gt) pair.

    Args:
        pred: (N, k, 2) keypoints
        gt: (M, k, 2) keypoints

    Returns:
        (N, M) IoU matrix
    """
    lo_p, hi_p = _boxes(pred)
    lo_g, hi_g = _boxes(gt)
    lo = np.maximum(lo_p[:, None], lo_g[None])
    hi = np.minimum(hi_p[:, None], hi_g[None])
    wh = np.maximum(hi - lo, 0.0)
    inter = wh[..., 0] * wh[..., 1]
    area_p = np.prod(hi_p - lo_p, axis=-1)
    area_g = np.prod(hi_g - lo_g, axis=-1)
    return inter / (area_p[:, None] + area_g[None] - inter)


def _pairwise_smooth_l1(pred: np.ndarray, gt: np.ndarray, beta: float = 1.0) -> np.ndarray:
    d = np.abs(pred[:, None] - gt[None])
    per = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.reshape(per.shape[0], per.shape[1], -1).mean(axis=-1)


def _check_compatible(preds: SetPrediction, targets: ElementTargets) -> None:
    if preds.repr_kind is not targets.repr_kind:
        raise MatchingError(
            f"keypoint representation mismatch: {preds.repr_kind.value} vs "
            f"{targets.repr_kind.value}"
        )
    if targets.num > preds.n_max:
        raise MatchingError(f"{targets.num} targets exceed {preds.n_max} queries")


def pairwise_match_cost(preds: SetPrediction, targets: ElementTargets) -> CostMatrix:
    """
    Matching cost of every query against every GT and no-object slot.

    Args:
        preds: Unbatched detections (N queries)
        targets: GT elements (M <= N)

    Returns:
        N x N CostMatrix; real columns cost 2 NLL + 0.1 smooth-L1 + (1 - IoU),
        padding columns cost 0.1 NLL of the no-object class
    """
    _check_compatible(preds, targets)
    n, m = preds.n_max, targets.num
    log_probs = preds.log_probs()
    kps = preds.keypoints.data

    entries = np.empty((n, n), dtype=np.float64)
    if m:
        cls_cost = -log_probs[:, targets.labels]
        l1_cost = _pairwise_smooth_l1(kps, targets.keypoints)
        iou_cost = 1.0 - pairwise_box_iou(kps, targets.keypoints)
        entries[:, :m] = CLASS_WEIGHT * cls_cost + L1_WEIGHT * l1_cost + IOU_WEIGHT * iou_cost
    entries[:, m:] = NO_OBJECT_WEIGHT * (-log_probs[:, NO_OBJECT])[:, None]
    return CostMatrix(entries=entries, num_real=m)


def smooth_l1_tensor(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Per-row mean smooth-L1 of (M, k, 2) keypoints."""
    d = T.sub(pred, target)
    ad = T.absolute(d)
    per = T.where(ad.data < beta, T.mul(T.mul(d, d), 0.5 / beta), T.sub(ad, 0.5 * beta))
    return T.mean(T.reshape(per, (per.shape[0], -1)), axis=-1)


def box_iou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable IoU of matched (M, k, 2) keypoint boxes."""
    lo, hi = T.amin(pred, axis=-2), T.amax(pred, axis=-2)
    center = T.mul(T.add(lo, hi), 0.5)
    half = T.maximum(T.mul(T.sub(hi, lo), 0.5), MIN_BOX_SIDE_M / 2.0)
    lo_p, hi_p = T.sub(center, half), T.add(center, half)
    lo_g, hi_g = _boxes(target)

    wh = T.maximum(T.sub(T.minimum(hi_p, hi_g), T.maximum(lo_p, lo_g)), 0.0)
    inter = T.mul(wh[:, 0], wh[:, 1])
    size_p = T.sub(hi_p, lo_p)
    area_p = T.mul(size_p[:, 0], size_p[:, 1])
    area_g = np.prod(hi_g - lo_g, axis=-1)
    return T.div(inter, T.sub(T.add(area_p, area_g), inter))


@dataclass
class SetLossParts:
    """Detector loss components of one sample, or their batch means."""

    classification: float
    regression: float
    iou: float

    @classmethod
    def mean(cls, parts: Sequence["SetLossParts"]) -> "SetLossParts":
        n = max(len(parts), 1)
        return cls(
            classification=sum(p.classification for p in parts) / n,
            regression=sum(p.regression for p in parts) / n,
            iou=sum(p.iou for p in parts) / n,
        )

    def values(self) -> Dict[str, float]:
        return {"loss_cls": self.classification, "loss_l1": self.regression, "loss_iou": self.iou}


def sample_set_loss(
    preds: SetPrediction,
    targets: ElementTargets,
) -> Tuple[Tensor, Assignment, SetLossParts]:
    """
    Set loss of one sample.

    Args:
        preds: Unbatched detections
        targets: GT elements

    Returns:
        (loss tensor, assignment, component values)
    """
    cost = pairwise_match_cost(preds, targets)
    assignment = hungarian(cost)
    m = targets.num

    perm = np.asarray(assignment.permutation)
    real = perm < m
    cls_targets = np.full(preds.n_max, NO_OBJECT, dtype=np.int64)
    cls_targets[real] = targets.labels[perm[real]]
    weights = np.where(real, 1.0, NO_OBJECT_WEIGHT)
    cls_loss = T.mul(T.cross_entropy(preds.logits, cls_targets, weights, "sum"), CLASS_WEIGHT)

    if m == 0:
        return cls_loss, assignment, SetLossParts(cls_loss.item(), 0.0, 0.0)

    queries = assignment.matched_queries(m)
    matched = preds.keypoints[queries]
    l1 = T.mul(T.tsum(smooth_l1_tensor(matched, targets.keypoints)), L1_WEIGHT)
    iou = T.mul(T.tsum(T.sub(1.0, box_iou_tensor(matched, targets.keypoints))), IOU_WEIGHT)
    total = T.add(T.add(cls_loss, l1), iou)
    return total, assignment, SetLossParts(cls_loss.item(), l1.item(), iou.item())


def detector_set_loss(
    preds: SetPrediction,
    targets: Sequence[ElementTargets],
) -> Tuple[Tensor, List[Assignment], SetLossParts]:
    """
    Batch-mean bipartite set loss.

    Args:
        preds: Batched detections (B, N, ...)
        targets: One ElementTargets per sample

    Returns:
        (scalar loss, per-sample assignments, batch-mean components)
    """
    if len(targets) != preds.batch_size:
        raise MatchingError(f"{len(targets)} targets for a batch of {preds.batch_size}")
    losses, assignments, parts = [], [], []
    for b, sample_targets in enumerate(targets):
        loss, assignment, sample_parts = sample_set_loss(preds.sample(b), sample_targets)
        losses.append(loss)
        assignments.append(assignment)
        parts.append(sample_parts)
    return T.mean(T.stack(losses)), assignments, SetLossParts.mean(parts)
