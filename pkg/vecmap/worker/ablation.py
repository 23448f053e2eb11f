"""
Ablation harness: train and evaluate several variants on one dataset.

This module provides:
- AblationKind: keypoint representation or target curve sampling
- variants: the configurations compared by each kind
- run_ablation: train both stages per variant, evaluate, collect a table
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Tuple

from vecmap.models.config import EvalRun, RunConfig, TargetSampling
from vecmap.models.schemas import KeypointRepr, MapClass, MetricKind, format_table
from vecmap.worker.evaluator import EvalResult, evaluate
from vecmap.worker.trainer import load_training_data, train_stage1, train_stage2_finetune

logger = logging.getLogger(__name__)


class AblationKind(str, Enum):
    KEYPOINT = "keypoint"
    SAMPLING = "sampling"


def variants(kind: AblationKind, base: RunConfig) -> List[Tuple[str, RunConfig]]:
    """(row label, configuration) pairs compared by an ablation."""
    flat = base.to_flat()
    if kind is AblationKind.KEYPOINT:
        return [
            (r.label, RunConfig.from_flat({**flat, "repr_kind": r.value})) for r in KeypointRepr
        ]
    strategies = (TargetSampling.CURVATURE, TargetSampling.FIXED_INTERVAL)
    return [(s.value, RunConfig.from_flat({**flat, "sampling": s.value})) for s in strategies]


@dataclass
class AblationRow:
    name: str
    result: EvalResult

    def cells(self) -> List[str]:
        report = self.result.report
        cells = [self.name]
        for label in MapClass:
            cells.append(f"{100.0 * report.class_ap(label, MetricKind.CHAMFER):.1f}")
        for metric in (MetricKind.CHAMFER, MetricKind.FRECHET):
            cells.append(f"{100.0 * report.mean_ap.get(metric, 0.0):.1f}")
        return cells


@dataclass
class AblationResult:
    kind: AblationKind
    rows: List[AblationRow]

    def to_table(self) -> str:
        first = "Keypoint" if self.kind is AblationKind.KEYPOINT else "Sampling"
        header = [first, "AP_ped", "AP_divider", "AP_boundary", "Chamfer mAP", "Frechet mAP"]
        return format_table(header, [row.cells() for row in self.rows])

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "rows": {
                row.name: {m.value: v for m, v in row.result.report.mean_ap.items()}
                for row in self.rows
            },
        }


def run_ablation(
    kind: AblationKind,
    base: RunConfig,
    out_dir: Path,
    eval_split: str = "val",
    max_workers: int = 1,
    progress: bool = False,
) -> AblationResult:
    """
    Train stage 1 and stage 2 for every variant, then evaluate each.

    Args:
        kind: Which ablation to run
        base: Shared configuration (dataset, schedule, model size)
        out_dir: Root directory; each variant writes to its own subdirectory
        eval_split: Split used for evaluation
        max_workers: Threads for distance computation
        progress: Show progress bars

    Returns:
        AblationResult with one row per variant
    """
    out_dir = Path(out_dir)
    rows = []
    for name, cfg in variants(kind, base):
        run_dir = out_dir / kind.value / name.lower()
        logger.info(f"Ablation {kind.value}: training variant {name} in {run_dir}")
        data = load_training_data(cfg, "train")
        stage1 = train_stage1(cfg, run_dir, data=data, progress=progress)
        stage2 = train_stage2_finetune(cfg, stage1, run_dir, data=data, progress=progress)
        run = EvalRun(
            checkpoint=str(stage2),
            dataset_dir=cfg.train.dataset_dir,
            split=eval_split,
        )
        rows.append(AblationRow(name=name, result=evaluate(run, max_workers=max_workers)))
    result = AblationResult(kind=kind, rows=rows)
    logger.info(f"Ablation {kind.value} finished:\n{result.to_table()}")
    return result
