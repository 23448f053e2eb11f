"""End-to-end runs: data generation, both training stages and evaluation."""

import json

import numpy as np
import pytest

from vecmap.main import main
from vecmap.models.config import EvalRun, NoiseConfig, preset_config
from vecmap.models.schemas import MetricKind
from vecmap.network.mapnet import load_model
from vecmap.services.synthdata import build_dataset
from vecmap.worker.evaluator import evaluate
from vecmap.worker.trainer import (
    LOSS_LOG_NAME,
    load_training_data,
    train_stage1,
    train_stage2_finetune,
    validation_nll,
)


def cli_pipeline(root, seed: int = 0) -> dict:
    data, run, report = root / "data", root / "run", root / "report.json"
    tiny = ["--preset", "tiny"]
    gen = ["gen-data", *tiny, "--n", "4", "--seed", str(seed), "--out", str(data)]
    assert main(gen + ["--set", "train_fraction=0.5"]) == 0
    train = ["train", *tiny, "--data", str(data), "--out", str(run)]
    assert main(train + ["--set", "steps_stage1=4", "--set", "steps_stage2=2"]) == 0
    evaluate_args = ["eval", "--ckpt", str(run / "stage2.ckpt"), "--data", str(data)]
    assert main(evaluate_args + ["--report", str(report)]) == 0
    return json.loads(report.read_text())


def overfit_config(tmp_path, n_scenes: int, **overrides):
    cfg = preset_config("desk", dataset_dir=str(tmp_path / "data"), dropout=0.0, **overrides)
    build_dataset(
        tmp_path / "data",
        n_scenes,
        seed=cfg.scene.seed,
        split_ratios=(1.0,),
        scene_cfg=cfg.scene,
        noise_cfg=NoiseConfig.clean(),
        grid=cfg.grid,
    )
    return cfg


@pytest.mark.integration
class TestCommandLinePipeline:
    """Test suite for the full command-line workflow on the tiny preset."""

    def test_reports_are_reproducible(self, tmp_path):
        """Test identical seeds give identical AP reports and diagnostics."""
        a = cli_pipeline(tmp_path / "a")
        b = cli_pipeline(tmp_path / "b")
        assert a["report"] == b["report"]
        assert a["diagnostics"] == b["diagnostics"]
        assert a["split"] == "val"


@pytest.mark.slow
class TestOverfit:
    """Test suite for convergence on small fixed datasets (desk preset)."""

    def test_single_scene_loss_drops(self, tmp_path):
        """Test the stage-1 loss falls tenfold between step 10 and the last step."""
        cfg = overfit_config(tmp_path, 1, steps_stage1=500, log_every=1)
        train_stage1(cfg, tmp_path / "run")
        log = (tmp_path / "run" / LOSS_LOG_NAME).read_text().splitlines()
        totals = [json.loads(line)["loss_total"] for line in log]
        assert totals[-1] * 10.0 <= totals[10]

    def test_eight_scene_overfit(self, tmp_path):
        """Test both stages on eight scenes reach high AP on those scenes."""
        cfg = overfit_config(tmp_path, 8, steps_stage1=1500, steps_stage2=300)
        data = load_training_data(cfg)
        stage1 = train_stage1(cfg, tmp_path / "run", data=data)
        stage2 = train_stage2_finetune(cfg, stage1, tmp_path / "run", data=data)

        before, _, _ = load_model(stage1)
        after, _, _ = load_model(stage2)
        gt_before = validation_nll(before, data, keypoints="gt")
        gt_after = validation_nll(after, data, keypoints="gt")
        assert gt_after <= 1.2 * gt_before
        assert validation_nll(after, data, "predicted") < validation_nll(before, data, "predicted")

        run = EvalRun(checkpoint=str(stage2), dataset_dir=cfg.train.dataset_dir, split="train")
        report = evaluate(run).report
        assert report.metric_at(MetricKind.CHAMFER, 1.0) >= 0.90
        assert report.metric_at(MetricKind.FRECHET, 1.0) >= 0.75
        assert np.isfinite(report.mean_ap[MetricKind.CHAMFER])
