"""
vecmap command line entry point.

Subcommands:
- gen-data: procedural scenes and rasters
- train: stage 1, stage 2 or both
- eval: AP report of a checkpoint on a split
- render: SVG of a scene's GT and (optionally) the checkpoint's prediction
- oracle-eval: GT maps evaluated as predictions (protocol sanity check)
- ablate: keypoint-representation or curve-sampling ablation table

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from vecmap.models.config import EvalRun, RunConfig, resolve_config, validated
from vecmap.models.schemas import MetricKind
from vecmap.network.mapnet import load_model, predict_map
from vecmap.services.rendering import render_svg
from vecmap.services.synthdata import build_dataset, load_dataset
from vecmap.utils.errors import ConfigError, VecMapError
from vecmap.utils.logging_setup import RuntimeSettings, configure_logging
from vecmap.worker.ablation import AblationKind, run_ablation
from vecmap.worker.evaluator import evaluate, write_report
from vecmap.worker.trainer import load_training_data, train_stage1, train_stage2_finetune

logger = logging.getLogger(__name__)


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    """
    Parse repeated `--set key=value` flags.

    Raises:
        ConfigError: On a flag without '='
    """
    values = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_thresholds(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise ConfigError(f"invalid thresholds {text!r}: {e}") from e


def parse_metrics(name: str) -> tuple:
    if name == "both":
        return (MetricKind.CHAMFER, MetricKind.FRECHET)
    return (MetricKind(name),)


def run_config(args: argparse.Namespace, **flags: Any) -> RunConfig:
    """Resolve the run configuration; explicit flags win over everything else."""
    overrides: Dict[str, Any] = parse_overrides(args.set)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    config_path = Path(args.config) if args.config else None
    return resolve_config(config_path, overrides, preset=args.preset)


def cmd_gen_data(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    out = args.out or settings.data_dir
    cfg = run_config(args, n_scenes=args.n, seed=args.seed, dataset_dir=out)
    train = cfg.data.train_fraction
    build_dataset(
        Path(cfg.train.dataset_dir),
        cfg.data.n_scenes,
        seed=cfg.scene.seed,
        split_ratios=(train, 1.0 - train),
        scene_cfg=cfg.scene,
        noise_cfg=cfg.noise,
        grid=cfg.grid,
        max_workers=settings.max_workers,
        progress=args.progress,
    )
    return 0


def cmd_train(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    cfg = run_config(args, dataset_dir=args.data or settings.data_dir)
    out = Path(args.out)
    data = load_training_data(cfg, "train")
    if args.stage in ("1", "both"):
        stage1 = train_stage1(cfg, out, data=data, progress=args.progress)
        print(f"stage 1 checkpoint: {stage1}")
    else:
        stage1 = Path(args.ckpt) if args.ckpt else out / "stage1.ckpt"
    if args.stage in ("2", "both"):
        stage2 = train_stage2_finetune(cfg, stage1, out, data=data, progress=args.progress)
        print(f"stage 2 checkpoint: {stage2}")
    return 0


def _eval_run(args: argparse.Namespace, settings: RuntimeSettings, oracle: bool) -> EvalRun:
    return validated(
        EvalRun,
        checkpoint=None if oracle else args.ckpt,
        dataset_dir=args.data or settings.data_dir,
        split=args.split,
        thresholds=parse_thresholds(args.thresholds),
        metrics=parse_metrics(args.metric),
        score_threshold=args.score_threshold,
        oracle=oracle,
    )


def _report(args: argparse.Namespace, result) -> None:
    print(result.to_table(), end="")
    if args.report:
        write_report(result, Path(args.report))


def cmd_eval(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    run = _eval_run(args, settings, oracle=False)
    _report(args, evaluate(run, max_workers=settings.max_workers, progress=args.progress))
    return 0


def cmd_oracle_eval(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    run = _eval_run(args, settings, oracle=True)
    _report(args, evaluate(run, max_workers=settings.max_workers))
    return 0


def cmd_render(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    dataset = load_dataset(Path(args.data or settings.data_dir))
    gt = dataset.scene(args.scene)
    pred = None
    if args.ckpt:
        model, _, _ = load_model(Path(args.ckpt))
        pred, diag = predict_map(
            model,
            dataset.raster(args.scene),
            score_threshold=args.score_threshold,
            scene_id=args.scene,
        )
        logger.info(f"{args.scene}: {diag.decoded} of {diag.attempted} detections decoded")
    render_svg(Path(args.out), dataset.grid, gt=gt, pred=pred, title=args.scene)
    return 0


def cmd_ablate(args: argparse.Namespace, settings: RuntimeSettings) -> int:
    cfg = run_config(args, dataset_dir=args.data or settings.data_dir)
    result = run_ablation(
        AblationKind(args.kind),
        cfg,
        Path(args.out),
        eval_split=args.split,
        max_workers=settings.max_workers,
        progress=args.progress,
    )
    print(result.to_table(), end="")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--preset", choices=("desk", "paper", "tiny"), help="model/scene preset")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    p.add_argument("--metric", default="both", choices=("chamfer", "frechet", "both"))
    p.add_argument("--thresholds", default="0.5,1.0,1.5", help="comma-separated meters")
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.add_argument("--report", help="write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vecmap", description=__doc__.splitlines()[1])
    parser.add_argument("--log-level", help="overrides LOG_LEVEL")
    parser.add_argument("--log-format", choices=("text", "json"), help="overrides LOG_FORMAT")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, help="number of scenes")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--out", help="dataset directory")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train the map network")
    p.add_argument("--stage", default="both", choices=("1", "2", "both"))
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--ckpt", help="stage-1 checkpoint for --stage 2")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory")
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("oracle-eval", help="evaluate GT maps as predictions")
    p.add_argument("--data", help="dataset directory")
    _add_eval_flags(p)
    p.set_defaults(handler=cmd_oracle_eval, ckpt=None)

    p = sub.add_parser("render", help="render a scene as SVG")
    p.add_argument("--scene", required=True, help="scene id, e.g. scene_00000")
    p.add_argument("--ckpt", help="draw this checkpoint's prediction too")
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("ablate", help="run an ablation study")
    p.add_argument("--kind", required=True, choices=[k.value for k in AblationKind])
    p.add_argument("--out", required=True, help="root run directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", default="val", choices=("train", "val", "all"))
    _add_config_flags(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    settings = RuntimeSettings()
    configure_logging(
        level=args.log_level or settings.log_level,
        fmt=args.log_format or settings.log_format,
        log_file=settings.log_file,
    )
    try:
        return args.handler(args, settings)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130
    except VecMapError as e:
        logger.error(f"{type(e).__name__}: {e.message}", extra={"detail": e.detail})
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
