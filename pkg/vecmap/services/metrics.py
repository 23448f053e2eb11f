"""
Curve distances and instance-level average precision.

This module provides:
- chamfer_distance / chamfer_point_sets: symmetric mean nearest-neighbor distance
- frechet_distance: discrete Frechet distance by dynamic programming
- frechet_bruteforce: exhaustive coupling enumeration (small inputs only)
- instance_ap: AP for one (class, threshold, metric) cell
- evaluate_map_set: full Chamfer/Frechet AP report over a set of scenes
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from vecmap.models.schemas import (
    APEntry,
    APReport,
    MapClass,
    MapElement,
    MetricKind,
    Polyline,
    PredictedMap,
    ScoredPrediction,
    VectorMap,
)
from vecmap.services.geometry import uniform_points
from vecmap.utils.errors import DatasetError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5)
DEFAULT_METRICS = (MetricKind.CHAMFER, MetricKind.FRECHET)
BRUTEFORCE_MAX_POINTS = 8


# ---------------------------------------------------------------------------
# Curve distances
# ---------------------------------------------------------------------------


def chamfer_point_sets(s1: np.ndarray, s2: np.ndarray) -> float:
    """
    Chamfer distance between two raw point sets.

    Args:
        s1: (N, 2) points
        s2: (M, 2) points

    Returns:
        0.5 * (mean nearest distance s1->s2 + mean nearest distance s2->s1)
    """
    s1 = np.asarray(s1, dtype=np.float64).reshape(-1, 2)
    s2 = np.asarray(s2, dtype=np.float64).reshape(-1, 2)
    if len(s1) == 0 or len(s2) == 0:
        raise ValueError("point sets must not be empty")
    d = cdist(s1, s2)
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def chamfer_distance(p: Polyline, q: Polyline, n_pts: int = 100) -> float:
    """Chamfer distance after uniform resampling of both curves to n_pts."""
    return chamfer_point_sets(uniform_points(p.array(), n_pts), uniform_points(q.array(), n_pts))


def frechet_from_matrix(dist: np.ndarray) -> float:
    """
    Discrete Frechet distance from a pairwise distance matrix.

    Anti-diagonals of the coupling table are filled one at a time; each cell
    is max(d(i, j), min(left, down, diagonal)).

    Args:
        dist: (p, q) pairwise distances

    Returns:
        Coupling distance
    """
    p, q = dist.shape
    table = np.full((p + 1, q + 1), np.inf)
    table[0, 0] = 0.0
    for s in range(2, p + q + 1):
        i = np.arange(max(1, s - q), min(p, s - 1) + 1)
        j = s - i
        best = np.minimum(np.minimum(table[i - 1, j], table[i, j - 1]), table[i - 1, j - 1])
        table[i, j] = np.maximum(dist[i - 1, j - 1], best)
    return float(table[p, q])


def frechet_points(s1: np.ndarray, s2: np.ndarray) -> float:
    """Discrete Frechet distance between two ordered point sequences."""
    s1 = np.asarray(s1, dtype=np.float64).reshape(-1, 2)
    s2 = np.asarray(s2, dtype=np.float64).reshape(-1, 2)
    if len(s1) == 0 or len(s2) == 0:
        raise ValueError("point sequences must not be empty")
    return frechet_from_matrix(cdist(s1, s2))


def frechet_distance(p: Polyline, q: Polyline, m: int = 100) -> float:
    """
    Discrete Frechet distance after uniform resampling to m vertices.

    Args:
        p: First polyline
        q: Second polyline
        m: Resampled vertex count

    Returns:
        Minimum over monotone couplings of the longest paired distance
    """
    return frechet_points(uniform_points(p.array(), m), uniform_points(q.array(), m))


def _bruteforce_couplings(dist: np.ndarray, i: int, j: int, running: float) -> float:
    running = max(running, dist[i, j])
    p, q = dist.shape
    if i == p - 1 and j == q - 1:
        return running
    options = []
    if i + 1 < p:
        options.append(_bruteforce_couplings(dist, i + 1, j, running))
    if j + 1 < q:
        options.append(_bruteforce_couplings(dist, i, j + 1, running))
    if i + 1 < p and j + 1 < q:
        options.append(_bruteforce_couplings(dist, i + 1, j + 1, running))
    return min(options)


def frechet_bruteforce(
    p: Polyline,
    q: Polyline,
    m: Optional[int] = None,
) -> float:
    """
    Frechet distance by enumerating every monotone coupling.

    Args:
        p: First polyline
        q: Second polyline
        m: Optional resampled vertex count; stored vertices are used when None

    Returns:
        Coupling distance, equal to frechet_distance on the same sequences

    Raises:
        ValueError: When either sequence has more than 8 vertices
    """
    s1 = uniform_points(p.array(), m) if m else p.array()
    s2 = uniform_points(q.array(), m) if m else q.array()
    if len(s1) > BRUTEFORCE_MAX_POINTS or len(s2) > BRUTEFORCE_MAX_POINTS:
        raise ValueError(
            f"brute-force Frechet limited to {BRUTEFORCE_MAX_POINTS} vertices, "
            f"got {len(s1)} and {len(s2)}"
        )
    return _bruteforce_couplings(cdist(s1, s2), 0, 0, 0.0)


def curve_distance(p: np.ndarray, q: np.ndarray, metric: MetricKind) -> float:
    """Distance between two already-resampled point sequences."""
    if metric is MetricKind.CHAMFER:
        return chamfer_point_sets(p, q)
    return frechet_points(p, q)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """
    Area under the precision-recall curve with the all-point precision envelope.

    Args:
        tp: 1/0 flags of predictions in descending score order
        num_gt: Number of ground-truth instances

    Returns:
        AP in [0, 1]
    """
    tp = np.asarray(tp, dtype=np.float64)
    if num_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    rec = cum_tp / num_gt
    prec = cum_tp / np.arange(1, len(tp) + 1)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.clip(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]), 0.0, 1.0))


@dataclass
class SceneDistances:
    """Prediction-to-GT distances of one class in one scene."""

    scene_id: str
    scores: np.ndarray
    matrix: np.ndarray

    @property
    def num_pred(self) -> int:
        return len(self.scores)

    @property
    def num_gt(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Match:
    """One greedy match decision."""

    scene_id: str
    pred_index: int
    score: float
    gt_index: Optional[int] = None
    distance: Optional[float] = None

    @property
    def is_tp(self) -> bool:
        return self.gt_index is not None


def _resampled(elements: Sequence[MapElement], n_pts: int) -> List[np.ndarray]:
    return [uniform_points(e.polyline.array(), n_pts) for e in elements]


def scene_distances(
    scene_id: str,
    preds: Sequence[ScoredPrediction],
    gts: Sequence[MapElement],
    metric: MetricKind,
    n_pts: int = 100,
) -> SceneDistances:
    """
    Distance matrix between predictions and GT elements of one scene.

    Args:
        scene_id: Scene identifier
        preds: Predictions (single class)
        gts: Ground-truth elements (same class)
        metric: Curve distance
        n_pts: Resampled vertex count

    Returns:
        SceneDistances with a (num_pred, num_gt) matrix
    """
    pred_pts = _resampled([p.element for p in preds], n_pts)
    gt_pts = _resampled(gts, n_pts)
    matrix = np.zeros((len(pred_pts), len(gt_pts)))
    for i, a in enumerate(pred_pts):
        for j, b in enumerate(gt_pts):
            matrix[i, j] = curve_distance(a, b, metric)
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return SceneDistances(scene_id=scene_id, scores=scores, matrix=matrix)


def greedy_match(tables: Sequence[SceneDistances], threshold_m: float) -> List[Match]:
    """
    Score-ordered greedy matching across scenes.

    Predictions are ranked globally by score (ties keep scene then row order);
    each takes the nearest unmatched GT of its scene within threshold_m.

    Args:
        tables: Per-scene distance tables of one class and metric
        threshold_m: Positive-match distance

    Returns:
        Match decisions in ranking order
    """
    order: List[Tuple[float, int, int]] = []
    for t_idx, table in enumerate(tables):
        for row in range(table.num_pred):
            order.append((float(table.scores[row]), t_idx, row))
    order.sort(key=lambda item: -item[0])

    used = [np.zeros(t.num_gt, dtype=bool) for t in tables]
    matches: List[Match] = []
    for score, t_idx, row in order:
        table = tables[t_idx]
        match = Match(scene_id=table.scene_id, pred_index=row, score=score)
        if table.num_gt:
            dists = np.where(used[t_idx], np.inf, table.matrix[row])
            best = int(np.argmin(dists))
            if np.isfinite(dists[best]) and dists[best] <= threshold_m:
                used[t_idx][best] = True
                match.gt_index = best
                match.distance = float(dists[best])
        matches.append(match)
    return matches


def instance_ap(
    preds: Sequence[ScoredPrediction],
    gts: Mapping[str, Sequence[MapElement]],
    label: MapClass,
    threshold_m: float,
    metric: MetricKind,
    n_pts: int = 100,
) -> float:
    """
    Instance-level AP of one class.

    Args:
        preds: Scored predictions (other classes are ignored)
        gts: Ground-truth elements keyed by scene id
        label: Class under evaluation
        threshold_m: Positive-match distance in meters
        metric: Chamfer or Frechet
        n_pts: Resampled vertex count

    Returns:
        AP in [0, 1]
    """
    by_scene: Dict[str, List[ScoredPrediction]] = {}
    for p in preds:
        if p.element.label is label:
            by_scene.setdefault(p.scene_id, []).append(p)

    scene_ids = list(gts) + [s for s in by_scene if s not in gts]
    tables = [
        scene_distances(
            sid,
            by_scene.get(sid, []),
            [e for e in gts.get(sid, []) if e.label is label],
            metric,
            n_pts,
        )
        for sid in scene_ids
    ]
    num_gt = sum(t.num_gt for t in tables)
    matches = greedy_match(tables, threshold_m)
    return average_precision(np.array([m.is_tp for m in matches]), num_gt)


@dataclass
class DistanceCache:
    """Per (scene, class, metric) distance tables of one prediction set."""

    tables: Dict[Tuple[str, MapClass, MetricKind], SceneDistances] = field(default_factory=dict)

    def for_cell(self, label: MapClass, metric: MetricKind) -> List[SceneDistances]:
        """Tables of one class and metric in scene order."""
        return [t for (sid, c, m), t in self.tables.items() if c is label and m is metric]


def _check_scene_ids(pred_maps: Sequence[PredictedMap], gt_maps: Sequence[VectorMap]) -> None:
    pred_ids = [p.scene_id for p in pred_maps]
    gt_ids = [g.scene_id for g in gt_maps]
    if len(set(gt_ids)) != len(gt_ids) or len(set(pred_ids)) != len(pred_ids):
        raise DatasetError("duplicate scene ids in evaluation input")
    if set(pred_ids) != set(gt_ids):
        missing = sorted(set(gt_ids) - set(pred_ids))
        extra = sorted(set(pred_ids) - set(gt_ids))
        raise DatasetError(f"scene ids do not align (missing {missing}, unexpected {extra})")


def build_distance_cache(
    pred_maps: Sequence[PredictedMap],
    gt_maps: Sequence[VectorMap],
    metric_kinds: Sequence[MetricKind] = DEFAULT_METRICS,
    n_pts: int = 100,
    max_workers: int = 1,
) -> DistanceCache:
    """
    Compute every distance table once; scenes run on worker threads.

    Args:
        pred_maps: Predictions per scene
        gt_maps: Ground truth per scene
        metric_kinds: Metrics to compute
        n_pts: Resampled vertex count
        max_workers: Thread count (1 runs inline)

    Returns:
        DistanceCache keyed by (scene, class, metric)
    """
    _check_scene_ids(pred_maps, gt_maps)
    preds_by_id = {p.scene_id: p for p in pred_maps}

    def one_scene(gt: VectorMap) -> Dict[Tuple[str, MapClass, MetricKind], SceneDistances]:
        out = {}
        preds = preds_by_id[gt.scene_id].predictions
        for label in MapClass:
            class_preds = [p for p in preds if p.element.label is label]
            class_gts = gt.by_class(label)
            for metric in metric_kinds:
                out[(gt.scene_id, label, metric)] = scene_distances(
                    gt.scene_id, class_preds, class_gts, metric, n_pts
                )
        return out

    cache = DistanceCache()
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one_scene, gt_maps))
    else:
        results = [one_scene(gt) for gt in gt_maps]
    for result in results:
        cache.tables.update(result)
    return cache


def evaluate_map_set(
    pred_maps: Sequence[PredictedMap],
    gt_maps: Sequence[VectorMap],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    metric_kinds: Sequence[MetricKind] = DEFAULT_METRICS,
    n_pts: int = 100,
    max_workers: int = 1,
    cache: Optional[DistanceCache] = None,
) -> APReport:
    """
    Chamfer/Frechet AP for every (class, threshold, metric) cell.

    Args:
        pred_maps: Predictions per scene (scene ids must match gt_maps)
        gt_maps: Ground-truth maps
        thresholds: Distance thresholds in meters
        metric_kinds: Metrics to evaluate
        n_pts: Resampled vertex count
        max_workers: Threads for distance computation
        cache: Precomputed distance tables

    Returns:
        APReport; mAP is the mean over classes of the mean over thresholds
    """
    if cache is None:
        cache = build_distance_cache(pred_maps, gt_maps, metric_kinds, n_pts, max_workers)
    else:
        _check_scene_ids(pred_maps, gt_maps)

    entries: List[APEntry] = []
    notes = ["predictions ranked globally by score across scenes"]
    mean_ap: Dict[MetricKind, float] = {}
    for metric in metric_kinds:
        class_means = []
        for label in MapClass:
            tables = cache.for_cell(label, metric)
            num_gt = sum(t.num_gt for t in tables)
            num_pred = sum(t.num_pred for t in tables)
            if num_gt == 0 and num_pred == 0 and metric is metric_kinds[0]:
                notes.append(f"{label.value}: no GT and no predictions, AP set to 1.0")
            aps = []
            for tau in thresholds:
                matches = greedy_match(tables, tau)
                ap = average_precision(np.array([m.is_tp for m in matches]), num_gt)
                aps.append(ap)
                entries.append(
                    APEntry(
                        label=label,
                        threshold_m=float(tau),
                        metric=metric,
                        ap=ap,
                        num_gt=num_gt,
                        num_pred=num_pred,
                    )
                )
            class_means.append(float(np.mean(aps)))
        mean_ap[metric] = float(np.mean(class_means))
        logger.info(f"{metric.value} mAP {100.0 * mean_ap[metric]:.1f} over {len(gt_maps)} scenes")

    return APReport(
        entries=entries,
        mean_ap=mean_ap,
        thresholds=tuple(float(t) for t in thresholds),
        notes=notes,
    )
