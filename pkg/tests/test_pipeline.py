"""Tests for training, evaluation, ablations and the command line."""

import json

import numpy as np
import pytest

from vecmap.main import main, parse_overrides, parse_thresholds
from vecmap.models.config import EvalRun, NoiseConfig, RunConfig, TargetSampling
from vecmap.models.schemas import KeypointRepr, MapClass, MetricKind
from vecmap.network.mapnet import build_model, load_model
from vecmap.numerics.checkpoint import checkpoint_hash
from vecmap.services.synthdata import build_dataset, load_dataset
from vecmap.utils.errors import ConfigError, DatasetError
from vecmap.worker.ablation import AblationKind, run_ablation, variants
from vecmap.worker.evaluator import distance_histogram, evaluate, write_report
from vecmap.worker.trainer import (
    LOSS_LOG_NAME,
    load_training_data,
    train_stage1,
    train_stage2_finetune,
    validation_nll,
)


def with_overrides(cfg: RunConfig, **values) -> RunConfig:
    return RunConfig.from_flat({**cfg.to_flat(), **values})


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.mark.unit
class TestTrainer:
    """Test suite for the two training stages."""

    def test_stage1_writes_checkpoint_and_log(self, tmp_path, tiny_run_cfg):
        """Test every logged step records total = det + gen and the det components."""
        ckpt = train_stage1(tiny_run_cfg, tmp_path / "run")
        assert ckpt.name == "stage1.ckpt"
        records = read_log(tmp_path / "run" / LOSS_LOG_NAME)
        assert [r["step"] for r in records] == [0, 1, 2]
        for r in records:
            assert r["stage"] == 1
            assert r["loss_total"] == pytest.approx(r["loss_det"] + r["loss_gen"])
            parts = r["loss_cls"] + r["loss_l1"] + r["loss_iou"]
            assert r["loss_det"] == pytest.approx(parts)
            assert np.isfinite(r["grad_norm"])
        _, cfg, header = load_model(ckpt)
        assert cfg.model == tiny_run_cfg.model
        assert header["meta"]["steps"] == 3

    def test_training_is_deterministic(self, tmp_path, tiny_run_cfg):
        """Test two runs with one seed write byte-identical checkpoints."""
        data = load_training_data(tiny_run_cfg)
        a = train_stage1(tiny_run_cfg, tmp_path / "a", data=data)
        b = train_stage1(tiny_run_cfg, tmp_path / "b", data=data)
        assert checkpoint_hash(a) == checkpoint_hash(b)

    def test_parameters_change(self, tmp_path, tiny_run_cfg):
        """Test stage 1 moves the weights away from their initialization."""
        initial = build_model(tiny_run_cfg.model, seed=tiny_run_cfg.train.seed)
        before = dict(initial.named_parameters())
        trained, _, _ = load_model(train_stage1(tiny_run_cfg, tmp_path))
        moved = [
            not np.array_equal(before[name].data, p.data)
            for name, p in trained.named_parameters()
        ]
        assert any(moved)

    def test_stage2_without_steps_keeps_weights(self, tmp_path, tiny_run_cfg):
        """Test a zero-step fine-tune saves the stage-1 weights unchanged."""
        cfg = with_overrides(tiny_run_cfg, steps_stage2=0)
        stage1 = train_stage1(cfg, tmp_path)
        stage2 = train_stage2_finetune(cfg, stage1, tmp_path)
        first, _, _ = load_model(stage1)
        second, _, header = load_model(stage2)
        assert header["meta"]["stage"] == 2
        for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_stage2_logs_stage_number(self, tmp_path, tiny_run_cfg):
        """Test stage 2 appends its own records to the shared loss log."""
        stage1 = train_stage1(tiny_run_cfg, tmp_path)
        train_stage2_finetune(tiny_run_cfg, stage1, tmp_path)
        stages = [r["stage"] for r in read_log(tmp_path / LOSS_LOG_NAME)]
        assert stages == [1, 1, 1, 2, 2]

    def test_validation_nll(self, tiny_run_cfg):
        """Test validation NLL is finite and positive for both keypoint sources."""
        model = build_model(tiny_run_cfg.model, seed=0)
        data = load_training_data(tiny_run_cfg, "val")
        gt = validation_nll(model, data, keypoints="gt")
        predicted = validation_nll(model, data, keypoints="predicted")
        assert gt > 0.0 and np.isfinite(gt)
        assert predicted > 0.0 and np.isfinite(predicted)
        with pytest.raises(ValueError):
            validation_nll(model, data, keypoints="both")

    def test_empty_split(self, tmp_path, tiny_cfg):
        """Test training data cannot come from an empty split."""
        root = tmp_path / "train_only"
        build_dataset(
            root,
            2,
            split_ratios=(1.0,),
            scene_cfg=tiny_cfg.scene,
            noise_cfg=NoiseConfig.clean(),
            grid=tiny_cfg.grid,
        )
        cfg = with_overrides(tiny_cfg, dataset_dir=str(root))
        with pytest.raises(DatasetError):
            load_training_data(cfg, "val")

    def test_grid_mismatch(self, tiny_run_cfg):
        """Test a model grid differing from the dataset grid is rejected."""
        cfg = with_overrides(tiny_run_cfg, grid_width_cells=18)
        with pytest.raises(ConfigError):
            load_training_data(cfg)


@pytest.mark.unit
class TestEvaluator:
    """Test suite for end-to-end evaluation."""

    def test_oracle_is_perfect(self, tiny_dataset):
        """Test GT maps scored as predictions reach mAP 1 under both metrics."""
        result = evaluate(EvalRun(dataset_dir=str(tiny_dataset), oracle=True, split="all"))
        for metric in (MetricKind.CHAMFER, MetricKind.FRECHET):
            assert result.report.mean_ap[metric] == pytest.approx(1.0)
        for scene in result.scenes:
            hist = scene.histograms["chamfer"]
            assert hist[0] == scene.attempted
            assert sum(hist[1:]) == 0

    def test_report_json_is_deterministic(self, tiny_dataset, tmp_path):
        """Test two evaluations write identical reports."""
        run = EvalRun(dataset_dir=str(tiny_dataset), oracle=True)
        a = write_report(evaluate(run), tmp_path / "a.json")
        b = write_report(evaluate(run, max_workers=2), tmp_path / "b.json")
        assert a.read_text() == b.read_text()
        payload = json.loads(a.read_text())
        assert payload["oracle"] is True
        assert payload["split"] == "val"
        assert len(payload["diagnostics"]["scenes"]) == 2

    def test_model_without_confident_detections(self, tiny_run_cfg):
        """Test a score threshold above 1 keeps no predictions."""
        model = build_model(tiny_run_cfg.model, seed=0)
        run = EvalRun(dataset_dir=tiny_run_cfg.train.dataset_dir, score_threshold=1.01)
        result = evaluate(run, model=model)
        assert result.totals.attempted == 0
        assert result.report.class_ap(MapClass.BOUNDARY, MetricKind.CHAMFER) == 0.0

    def test_checkpoint_required(self, tiny_dataset):
        """Test non-oracle evaluation without a model or checkpoint is refused."""
        with pytest.raises(ConfigError):
            evaluate(EvalRun(dataset_dir=str(tiny_dataset)))

    def test_missing_checkpoint(self, tiny_dataset, tmp_path):
        """Test a checkpoint path that does not exist raises DatasetError."""
        run = EvalRun(dataset_dir=str(tiny_dataset), checkpoint=str(tmp_path / "x.ckpt"))
        with pytest.raises(DatasetError):
            evaluate(run)

    def test_distance_histogram(self):
        """Test matched distances fall into half-open bins."""
        assert distance_histogram([0.0, 0.49, 0.5, 1.2, 1.5, 9.0]) == [2, 1, 1, 2]
        assert distance_histogram([]) == [0, 0, 0, 0]


@pytest.mark.unit
class TestAblation:
    """Test suite for ablation variants."""

    def test_keypoint_variants(self, tiny_cfg):
        """Test the keypoint ablation covers every representation."""
        found = variants(AblationKind.KEYPOINT, tiny_cfg)
        assert [name for name, _ in found] == ["Bbox", "SME", "Extreme"]
        assert [cfg.model.repr_kind for _, cfg in found] == list(KeypointRepr)

    def test_sampling_variants(self, tiny_cfg):
        """Test the sampling ablation compares curvature and fixed-interval targets."""
        found = variants(AblationKind.SAMPLING, tiny_cfg)
        assert [cfg.train.sampling for _, cfg in found] == [
            TargetSampling.CURVATURE,
            TargetSampling.FIXED_INTERVAL,
        ]


@pytest.mark.integration
class TestAblationRun:
    """Test suite for a full ablation on the tiny preset."""

    def test_sampling_table(self, tmp_path, tiny_run_cfg):
        """Test both variants train, evaluate and appear in the table."""
        result = run_ablation(AblationKind.SAMPLING, tiny_run_cfg, tmp_path)
        table = result.to_table()
        assert table.splitlines()[0].split()[:2] == ["Sampling", "AP_ped"]
        assert "curvature" in table and "fixed_interval" in table
        assert (tmp_path / "sampling" / "curvature" / "stage2.ckpt").exists()
        assert set(result.to_dict()["rows"]) == {"curvature", "fixed_interval"}


@pytest.mark.unit
class TestCommandLine:
    """Test suite for the vecmap command."""

    def test_parse_helpers(self):
        """Test --set and --thresholds parsing."""
        assert parse_overrides(["hidden = 16", "seed=2"]) == {"hidden": "16", "seed": "2"}
        assert parse_thresholds("0.5,1.0") == (0.5, 1.0)
        with pytest.raises(ConfigError):
            parse_overrides(["hidden"])
        with pytest.raises(ConfigError):
            parse_thresholds("a,b")

    def test_gen_data_then_oracle_eval(self, tmp_path):
        """Test generating a dataset and scoring its GT both succeed."""
        data = tmp_path / "data"
        args = ["gen-data", "--preset", "tiny", "--n", "4", "--seed", "1", "--out", str(data)]
        assert main(args + ["--set", "train_fraction=0.5"]) == 0
        assert load_dataset(data).manifest["n_scenes"] == 4
        report = tmp_path / "oracle.json"
        assert main(["oracle-eval", "--data", str(data), "--report", str(report)]) == 0
        payload = json.loads(report.read_text())
        assert payload["report"]["mean_ap"]["chamfer"] == pytest.approx(1.0)

    def test_render(self, tmp_path, tiny_dataset):
        """Test the render command writes an SVG of a GT scene."""
        out = tmp_path / "scene.svg"
        args = ["render", "--data", str(tiny_dataset), "--scene", "scene_00000"]
        assert main(args + ["--out", str(out)]) == 0
        assert out.read_text().startswith("<?xml")

    def test_config_error_exit_code(self, tmp_path):
        """Test configuration errors exit with 2."""
        args = ["gen-data", "--preset", "tiny", "--out", str(tmp_path), "--set", "bogus=1"]
        assert main(args) == 2

    def test_data_error_exit_code(self, tmp_path):
        """Test a missing dataset exits with 3."""
        assert main(["oracle-eval", "--data", str(tmp_path / "missing")]) == 3
