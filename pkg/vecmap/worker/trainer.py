"""
Two-stage training of the map network.

This module provides:
- TrainingData / load_training_data: rasters and prepared targets of a split
- StageRunner: the optimization loop shared by both stages
- train_stage1: teacher forcing with GT keypoints as generator conditions
- train_stage2_finetune: generator conditioned on matched predicted keypoints
- validation_nll: per-element generator NLL with GT or predicted keypoints

Each stage writes `<out>/stage<N>.ckpt` and appends one JSON record per
logged step to `<out>/loss_log.jsonl`.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from vecmap.models.config import RunConfig, TrainConfig
from vecmap.network.mapnet import (
    Augmentation,
    MapModel,
    SceneTargets,
    build_model,
    compute_loss,
    generator_conditions,
    generator_loss,
    load_model,
    prepare_targets,
    save_model,
)
from vecmap.numerics.optim import AdamW, LRSchedule
from vecmap.numerics.tensor import eval_mode, no_grad, set_training
from vecmap.services.matching import detector_set_loss
from vecmap.services.synthdata import SyntheticDataset, load_dataset, manifest_hash
from vecmap.utils.errors import ConfigError, DatasetError, TrainingError

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss_log.jsonl"


@dataclass
class TrainingData:
    """Rasters (S, C, H, W) and targets of one split, in manifest order."""

    scene_ids: List[str]
    rasters: np.ndarray
    targets: List[SceneTargets]
    dataset_hash: str

    @property
    def size(self) -> int:
        return len(self.scene_ids)

    def batch(self, index: Sequence[int]):
        return self.rasters[np.asarray(index)], [self.targets[i] for i in index]


def check_grid(dataset: SyntheticDataset, cfg: RunConfig) -> None:
    """
    Raises:
        ConfigError: If the dataset rasters were drawn on another grid
    """
    ds_grid, grid = dataset.grid, cfg.grid
    same = (
        ds_grid.width_cells == grid.width_cells
        and ds_grid.height_cells == grid.height_cells
        and math.isclose(ds_grid.cell_m, grid.cell_m)
        and np.allclose(ds_grid.origin, grid.origin)
    )
    if not same:
        raise ConfigError(
            f"dataset grid {ds_grid.width_cells}x{ds_grid.height_cells}@{ds_grid.cell_m} m "
            f"does not match model grid {grid.width_cells}x{grid.height_cells}@{grid.cell_m} m"
        )


def load_training_data(cfg: RunConfig, split: str = "train") -> TrainingData:
    """
    Load a split and prepare its targets with the configured curve sampling.

    Raises:
        DatasetError: If the split is empty or files are missing
    """
    dataset = load_dataset(Path(cfg.train.dataset_dir))
    check_grid(dataset, cfg)
    ids = dataset.split_ids(split)
    if not ids:
        raise DatasetError(f"split {split!r} of {dataset.root} is empty")
    rasters = np.stack([dataset.raster(i) for i in ids])
    t = cfg.train
    targets = [
        prepare_targets(dataset.scene(i), cfg.model, t.sampling, t.curvature_deg, t.interval_m)
        for i in ids
    ]
    logger.info(f"Loaded {len(ids)} {split} scenes from {dataset.root}")
    return TrainingData(
        scene_ids=ids,
        rasters=rasters,
        targets=targets,
        dataset_hash=manifest_hash(dataset.root),
    )


def rng_streams(seed: int, stage: int) -> Dict[str, np.random.Generator]:
    """Independent generators for batch sampling, dropout and augmentation."""
    children = np.random.SeedSequence([seed, stage]).spawn(3)
    names = ("batch", "dropout", "augment")
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


class StageRunner:
    """Runs the optimization loop of one training stage."""

    def __init__(
        self,
        model: MapModel,
        cfg: RunConfig,
        data: TrainingData,
        stage: int,
        out_dir: Path,
    ):
        """
        Initialize runner.

        Args:
            model: Network to train in place
            cfg: Run configuration
            data: Training split
            stage: 1 or 2
            out_dir: Directory for checkpoint and loss log
        """
        self.model = model
        self.cfg = cfg
        self.train_cfg: TrainConfig = cfg.train
        self.data = data
        self.stage = stage
        self.out_dir = Path(out_dir)
        self.steps = self.train_cfg.steps_stage1 if stage == 1 else self.train_cfg.steps_stage2
        self.schedule = LRSchedule(
            base_lr=self.train_cfg.base_lr,
            warmup_steps=self.train_cfg.warmup_steps,
            decay_step=self.train_cfg.decay_step(self.steps),
        )
        self.optimizer = AdamW(
            model.named_parameters(),
            self.schedule,
            weight_decay=self.train_cfg.weight_decay,
            clip_norm=self.train_cfg.clip_norm,
        )
        self.rngs = rng_streams(self.train_cfg.seed, stage)
        self.augmentation = Augmentation(
            prob=self.train_cfg.aug_prob,
            sigma_m=self.train_cfg.aug_sigma_m,
            rng=self.rngs["augment"],
        )
        self.history: List[Dict[str, float]] = []

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / f"stage{self.stage}.ckpt"

    @property
    def loss_log_path(self) -> Path:
        return self.out_dir / LOSS_LOG_NAME

    def sample_batch(self) -> np.ndarray:
        size = min(self.train_cfg.batch_size, self.data.size)
        return np.sort(self.rngs["batch"].choice(self.data.size, size=size, replace=False))

    def step(self, step: int) -> Dict[str, float]:
        """
        One optimizer step.

        Raises:
            TrainingError: On a non-finite loss or gradient
        """
        rasters, targets = self.data.batch(self.sample_batch())
        loss, _ = compute_loss(
            self.model,
            rasters,
            targets,
            stage=self.stage,
            augmentation=self.augmentation,
            rng=self.rngs["dropout"],
        )
        values = loss.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingError(
                f"non-finite loss at stage {self.stage} step {step}",
                detail={"stage": self.stage, "step": step, **values},
            )
        self.optimizer.zero_grad()
        loss.total.backward()
        lr = self.schedule.lr_at(self.optimizer.state.step)
        grad_norm = self.optimizer.step()
        return {"stage": self.stage, "step": step, "lr": lr, "grad_norm": grad_norm, **values}

    def _log(self, record: Dict[str, float], fh) -> None:
        logger.info(
            f"stage {self.stage} step {record['step']}: total {record['loss_total']:.4f} "
            f"(det {record['loss_det']:.4f}, gen {record['loss_gen']:.4f}), lr {record['lr']:.2e}",
            extra=record,
        )
        fh.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self, progress: bool = False) -> Path:
        """
        Train for the configured number of steps and save the checkpoint.

        Returns:
            Checkpoint path
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Stage {self.stage}: {self.steps} steps on {self.data.size} scenes")
        set_training(True)
        try:
            with open(self.loss_log_path, "a", encoding="utf-8") as fh:
                steps = tqdm(range(self.steps), disable=not progress, desc=f"stage{self.stage}")
                for step in steps:
                    record = self.step(step)
                    self.history.append(record)
                    last = step == self.steps - 1
                    if step % self.train_cfg.log_every == 0 or last:
                        self._log(record, fh)
        finally:
            set_training(False)

        meta = {
            "stage": self.stage,
            "steps": self.steps,
            "dataset_hash": self.data.dataset_hash,
            "final": self.history[-1] if self.history else None,
        }
        return save_model(self.checkpoint_path, self.model, self.cfg, meta, self.optimizer.state)


def _training_data(cfg: RunConfig, data: Optional[TrainingData]) -> TrainingData:
    return data if data is not None else load_training_data(cfg, "train")


def train_stage1(
    cfg: RunConfig,
    out_dir: Path,
    data: Optional[TrainingData] = None,
    progress: bool = False,
) -> Path:
    """
    Stage 1: L = L_det + L_gen with GT keypoints as generator conditions.

    Args:
        cfg: Run configuration
        out_dir: Output directory
        data: Preloaded training split (loaded from cfg when omitted)
        progress: Show a progress bar

    Returns:
        Path of stage1.ckpt
    """
    model = build_model(cfg.model, seed=cfg.train.seed)
    runner = StageRunner(model, cfg, _training_data(cfg, data), stage=1, out_dir=out_dir)
    return runner.run(progress)


def train_stage2_finetune(
    cfg: RunConfig,
    stage1_checkpoint: Path,
    out_dir: Path,
    data: Optional[TrainingData] = None,
    progress: bool = False,
) -> Path:
    """
    Stage 2: continue from a stage-1 checkpoint, conditioning the generator
    on the keypoints predicted by the query matched to each GT element.

    The network dimensions come from the checkpoint; schedule and data
    settings come from `cfg`.

    Returns:
        Path of stage2.ckpt
    """
    model, ckpt_cfg, header = load_model(stage1_checkpoint)
    if ckpt_cfg.model != cfg.model:
        logger.warning("Model settings differ from the stage-1 checkpoint; using the checkpoint's")
        cfg = cfg.model_copy(update={"model": ckpt_cfg.model})
    logger.info(f"Fine-tuning from {stage1_checkpoint} (stage {header['meta'].get('stage')})")
    runner = StageRunner(model, cfg, _training_data(cfg, data), stage=2, out_dir=out_dir)
    return runner.run(progress)


def validation_nll(
    model: MapModel,
    data: TrainingData,
    keypoints: str = "gt",
    batch_size: int = 8,
) -> float:
    """
    Mean per-element teacher-forced NLL on a split, without augmentation.

    Args:
        model: Network
        data: Evaluation split
        keypoints: "gt" conditions on GT keypoints, "predicted" on the
            matched detector keypoints
        batch_size: Scenes per forward pass

    Returns:
        NLL averaged over elements (0.0 for a split without elements)
    """
    if keypoints not in ("gt", "predicted"):
        raise ValueError(f"keypoints must be 'gt' or 'predicted', got {keypoints!r}")
    total, count = 0.0, 0
    with no_grad(), eval_mode():
        for start in range(0, data.size, batch_size):
            index = list(range(start, min(start + batch_size, data.size)))
            rasters, targets = data.batch(index)
            features = model.encoder(rasters)
            if keypoints == "gt":
                cond = generator_conditions(model, targets)
            else:
                detections = model.detector(features)
                _, assignments, _ = detector_set_loss(detections, [t.elements for t in targets])
                cond = generator_conditions(model, targets, detections, assignments)
            if cond is None:
                continue
            nll = generator_loss(model, features, targets, cond)
            total += nll.item() * cond.num
            count += cond.num
    return total / count if count else 0.0
