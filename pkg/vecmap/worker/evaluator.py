"""
End-to-end evaluation of a checkpoint (or of GT maps in oracle mode).

This module provides:
- SceneDiagnostics: decode counts and matched-distance histograms per scene
- EvalResult: APReport plus diagnostics, as JSON or a text table
- predict_split: run the network over a dataset split
- evaluate: predictions -> distance cache -> APReport
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from vecmap.models.config import EvalRun
from vecmap.models.schemas import APReport, MapClass, MetricKind, PredictedMap, VectorMap
from vecmap.network.mapnet import (
    DecodeOptions,
    MapModel,
    PredictionDiagnostics,
    load_model,
    predict_map,
)
from vecmap.services.metrics import (
    DistanceCache,
    build_distance_cache,
    evaluate_map_set,
    greedy_match,
)
from vecmap.services.synthdata import SyntheticDataset, load_dataset
from vecmap.utils.errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

HISTOGRAM_EDGES_M = (0.5, 1.0, 1.5)
HISTOGRAM_LABELS = ("[0,0.5)", "[0.5,1.0)", "[1.0,1.5)", "[1.5,inf)")


def distance_histogram(distances: Sequence[float]) -> List[int]:
    """Counts of matched distances per bin of HISTOGRAM_LABELS."""
    bins = np.digitize(np.asarray(distances, dtype=np.float64), HISTOGRAM_EDGES_M)
    return [int(c) for c in np.bincount(bins, minlength=len(HISTOGRAM_LABELS))]


@dataclass
class SceneDiagnostics:
    """Per-scene decode counts and matched-distance histograms."""

    scene_id: str
    attempted: int = 0
    decoded: int = 0
    overflow: int = 0
    degenerate: int = 0
    histograms: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "scene_id": self.scene_id,
            "attempted": self.attempted,
            "decoded": self.decoded,
            "overflow": self.overflow,
            "degenerate": self.degenerate,
            "histograms": dict(sorted(self.histograms.items())),
        }


@dataclass
class EvalResult:
    """Report and diagnostics of one evaluate() call."""

    report: APReport
    scenes: List[SceneDiagnostics]
    checkpoint: Optional[str] = None
    split: str = "val"
    oracle: bool = False

    @property
    def totals(self) -> PredictionDiagnostics:
        total = PredictionDiagnostics()
        for s in self.scenes:
            total = total.merge(
                PredictionDiagnostics(s.attempted, s.decoded, s.overflow, s.degenerate)
            )
        return total

    def to_json(self) -> str:
        """Deterministic JSON with the AP report embedded."""
        totals = self.totals
        payload = {
            "checkpoint": self.checkpoint,
            "split": self.split,
            "oracle": self.oracle,
            "report": json.loads(self.report.to_json()),
            "diagnostics": {
                "histogram_bins_m": list(HISTOGRAM_LABELS),
                "attempted": totals.attempted,
                "decoded": totals.decoded,
                "overflow": totals.overflow,
                "degenerate": totals.degenerate,
                "scenes": [s.to_dict() for s in self.scenes],
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_table(self) -> str:
        totals = self.totals
        return (
            self.report.to_table()
            + f"detections {totals.attempted}, decoded {totals.decoded}, "
            f"EOS overflow {totals.overflow}, degenerate {totals.degenerate}\n"
        )


def scene_histograms(
    cache: DistanceCache, scene_id: str, metric_kinds: Sequence[MetricKind]
) -> Dict[str, List[int]]:
    """
    Histogram of matched distances in one scene, per metric.

    Matching is the score-greedy rule without a distance cutoff, class by
    class.
    """
    out = {}
    for metric in metric_kinds:
        distances = []
        for label in MapClass:
            table = cache.tables.get((scene_id, label, metric))
            if table is None:
                continue
            distances += [m.distance for m in greedy_match([table], np.inf) if m.is_tp]
        out[metric.value] = distance_histogram(distances)
    return out


def predict_split(
    model: MapModel,
    dataset: SyntheticDataset,
    scene_ids: Sequence[str],
    score_threshold: float,
    options: Optional[DecodeOptions] = None,
    progress: bool = False,
) -> Tuple[List[PredictedMap], Dict[str, PredictionDiagnostics]]:
    """Predicted maps and decode diagnostics for each scene, in order."""
    preds, diags = [], {}
    for scene_id in tqdm(scene_ids, disable=not progress, desc="predict"):
        pred, diag = predict_map(
            model,
            dataset.raster(scene_id),
            score_threshold=score_threshold,
            scene_id=scene_id,
            options=options,
        )
        preds.append(pred)
        diags[scene_id] = diag
    return preds, diags


def evaluate(
    run: EvalRun,
    max_workers: int = 1,
    model: Optional[MapModel] = None,
    progress: bool = False,
) -> EvalResult:
    """
    Evaluate a checkpoint (or GT maps in oracle mode) on a dataset split.

    Args:
        run: Evaluation request
        max_workers: Threads for the distance tables
        model: Already-loaded network (overrides run.checkpoint)
        progress: Show a progress bar while predicting

    Returns:
        EvalResult

    Raises:
        ConfigError: If neither a checkpoint nor oracle mode is requested
        DatasetError: On missing dataset files or checkpoints
    """
    dataset = load_dataset(Path(run.dataset_dir))
    scene_ids = dataset.split_ids(run.split)
    gt_maps: List[VectorMap] = [dataset.scene(sid) for sid in scene_ids]

    diags: Dict[str, PredictionDiagnostics] = {}
    if run.oracle:
        preds = [PredictedMap.from_vector_map(gt, score=1.0) for gt in gt_maps]
    else:
        if model is None:
            if not run.checkpoint:
                raise ConfigError("evaluation needs a checkpoint unless oracle mode is set")
            model, _, _ = load_model(Path(run.checkpoint))
        preds, diags = predict_split(
            model, dataset, scene_ids, run.score_threshold, progress=progress
        )

    logger.info(
        f"Evaluating {len(scene_ids)} {run.split} scenes "
        f"({'oracle' if run.oracle else run.checkpoint or 'in-memory model'})"
    )
    cache = build_distance_cache(preds, gt_maps, run.metrics, run.n_pts, max_workers)
    report = evaluate_map_set(
        preds, gt_maps, run.thresholds, run.metrics, run.n_pts, max_workers, cache=cache
    )

    scenes = []
    for pred, sid in zip(preds, scene_ids):
        diag = diags.get(sid) or PredictionDiagnostics(
            attempted=len(pred.predictions), decoded=len(pred.predictions)
        )
        scenes.append(
            SceneDiagnostics(
                scene_id=sid,
                attempted=diag.attempted,
                decoded=diag.decoded,
                overflow=diag.overflow,
                degenerate=diag.degenerate,
                histograms=scene_histograms(cache, sid, run.metrics),
            )
        )
    result = EvalResult(
        report=report,
        scenes=scenes,
        checkpoint=run.checkpoint,
        split=run.split,
        oracle=run.oracle,
    )
    totals = result.totals
    if totals.overflow or totals.degenerate:
        logger.warning(
            f"{totals.overflow} decodes hit the length cap, {totals.degenerate} were degenerate"
        )
    return result


def write_report(result: EvalResult, path: Path) -> Path:
    """Write the JSON report."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.to_json() + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"cannot write report {path}: {e}") from e
    logger.info(f"Wrote report to {path}")
    return path
