"""
End-to-end map network: encoder, detector and generator.

This module provides:
- MapModel / build_model: the three-stage network
- SceneTargets / prepare_targets: GT keypoints and token sequences of a scene
- compute_loss: detector set loss + generator NLL for both training stages
- predict_map: raster in, scored vector map out
- save_model / load_model: checkpoints with the run configuration embedded
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vecmap.models.config import ModelConfig, RunConfig, TargetSampling
from vecmap.models.schemas import (
    GridSpec,
    KeypointRepr,
    MapClass,
    MapElement,
    PredictedMap,
    ScoredPrediction,
    VectorMap,
    VertexTokenSeq,
)
from vecmap.network.detector import DetectionSet, MapElementDetector
from vecmap.network.encoder import BEVEncoder, BEVFeatureGrid
from vecmap.network.generator import (
    DecodeMode,
    PolylineGenerator,
    build_condition,
    decode_polyline,
    teacher_forced_nll,
)
from vecmap.network.layers import Module
from vecmap.numerics import tensor as T
from vecmap.numerics.checkpoint import load_checkpoint, save_checkpoint
from vecmap.numerics.optim import OptimState
from vecmap.numerics.tensor import Tensor, eval_mode, no_grad
from vecmap.services.geometry import ResampleStrategy, quantize_points, resample, tokens_to_polyline
from vecmap.services.matching import (
    Assignment,
    ElementTargets,
    SetLossParts,
    detector_set_loss,
)
from vecmap.utils.errors import DatasetError, InvalidPolylineError, ShapeError, TokenDecodeError

logger = logging.getLogger(__name__)

MODEL_PREFIX = "model."


class MapModel(Module):
    """BEV encoder -> map element detector -> polyline generator."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = BEVEncoder(cfg, rng)
        self.detector = MapElementDetector(cfg, rng)
        self.generator = PolylineGenerator(cfg, rng)

    @property
    def grid(self) -> GridSpec:
        return self.cfg.grid

    @property
    def repr_kind(self) -> KeypointRepr:
        return self.cfg.repr_kind

    def parameter_groups(self) -> Dict[str, List[str]]:
        """Parameter names by top-level component."""
        groups: Dict[str, List[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups


def build_model(cfg: ModelConfig, seed: int = 0) -> MapModel:
    model = MapModel(cfg, seed)
    logger.info(f"Built model with {model.num_parameters()} parameters (seed {seed})")
    return model


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneTargets:
    """
    Training targets of one scene.

    `vertices[i]` are the meter coordinates behind the coordinate tokens of
    `sequences[i]`, kept for input noise augmentation.
    """

    scene_id: str
    elements: ElementTargets
    sequences: Tuple[VertexTokenSeq, ...]
    vertices: Tuple[np.ndarray, ...]

    @property
    def num(self) -> int:
        return len(self.sequences)


def sample_target(
    poly,
    sampling: TargetSampling = TargetSampling.NONE,
    n_v_max: int = 20,
    curvature_deg: float = 5.0,
    interval_m: float = 2.0,
):
    """
    Resample a target polyline and bring it within the vertex budget.

    Returns:
        Polyline with at most n_v_max distinct vertices
    """
    out = poly
    try:
        if sampling is TargetSampling.CURVATURE:
            out = resample(poly, ResampleStrategy.curvature(math.radians(curvature_deg)))
        elif sampling is TargetSampling.FIXED_INTERVAL:
            out = resample(poly, ResampleStrategy.fixed_interval(interval_m))
        extra = 1 if out.closed else 0
        if out.num_vertices - extra > n_v_max:
            out = resample(out, ResampleStrategy.uniform(n_v_max + extra))
    except InvalidPolylineError as e:
        logger.debug(f"Keeping stored polyline, resampling failed: {e.message}")
        return poly
    return out


def target_tokens(poly, g: GridSpec) -> Tuple[VertexTokenSeq, np.ndarray]:
    """
    Token sequence of a polyline with consecutive same-cell vertices merged.

    Returns:
        (tokens, meter coordinates of the kept vertices)
    """
    pts = poly.array()
    if poly.closed:
        pts = pts[:-1]
    cells = quantize_points(pts, g)
    keep = np.ones(len(cells), dtype=bool)
    keep[1:] = np.any(cells[1:] != cells[:-1], axis=1)
    if poly.closed and keep.sum() > 1 and np.array_equal(cells[keep][-1], cells[0]):
        keep[np.flatnonzero(keep)[-1]] = False
    tokens = tuple(int(t) for t in cells[keep].reshape(-1)) + (g.eos_id,)
    return VertexTokenSeq(tokens=tokens, eos_id=g.eos_id), pts[keep]


def prepare_targets(
    vmap: VectorMap,
    cfg: ModelConfig,
    sampling: TargetSampling = TargetSampling.NONE,
    curvature_deg: float = 5.0,
    interval_m: float = 2.0,
) -> SceneTargets:
    """
    Keypoints (from the stored polylines) and token sequences (from the
    sampled polylines) of every element.

    Args:
        vmap: Ground-truth map
        cfg: Model configuration (grid, repr_kind, N_v_max)
        sampling: Target curve sampling strategy
        curvature_deg: Turn-angle threshold for curvature sampling
        interval_m: Spacing for fixed-interval sampling

    Returns:
        SceneTargets
    """
    elements = ElementTargets.from_map(vmap, cfg.repr_kind)
    sequences, vertices = [], []
    for element in vmap.elements:
        poly = sample_target(element.polyline, sampling, cfg.n_v_max, curvature_deg, interval_m)
        seq, pts = target_tokens(poly, cfg.grid)
        sequences.append(seq)
        vertices.append(pts)
    return SceneTargets(
        scene_id=vmap.scene_id,
        elements=elements,
        sequences=tuple(sequences),
        vertices=tuple(vertices),
    )


def augment_inputs(
    vertices: np.ndarray,
    g: GridSpec,
    prob: float,
    sigma_m: float,
    rng: np.random.Generator,
) -> Tuple[int, ...]:
    """
    Noisy teacher-forcing input tokens.

    Each vertex is perturbed with probability `prob` by i.i.d. Gaussian noise
    on x and y before quantization.
    """
    n = len(vertices)
    hit = rng.random(n) < prob
    noise = rng.normal(0.0, sigma_m, size=(n, 2)) * hit[:, None]
    cells = quantize_points(vertices + noise, g)
    return tuple(int(t) for t in cells.reshape(-1)) + (g.eos_id,)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Total loss, its two terms (total = det + gen) and the detector components."""

    total: Tensor
    det: Tensor
    gen: Tensor
    det_parts: SetLossParts

    def values(self) -> Dict[str, float]:
        return {
            "loss_total": self.total.item(),
            "loss_det": self.det.item(),
            "loss_gen": self.gen.item(),
            **self.det_parts.values(),
        }


@dataclass
class Augmentation:
    prob: float = 0.0
    sigma_m: float = 0.0
    rng: Optional[np.random.Generator] = None

    @property
    def active(self) -> bool:
        return self.prob > 0 and self.sigma_m > 0 and self.rng is not None


def generator_conditions(
    model: MapModel,
    targets: Sequence[SceneTargets],
    detections: Optional[DetectionSet] = None,
    assignments: Optional[Sequence[Assignment]] = None,
):
    """
    Conditions for every GT element of the batch.

    With detections and assignments, keypoints come from the query matched
    to each GT element; otherwise the GT keypoints are used.
    """
    labels, keypoints, scene_index = [], [], []
    for b, t in enumerate(targets):
        if t.num == 0:
            continue
        if detections is None or assignments is None:
            kps = t.elements.keypoints
        else:
            queries = assignments[b].matched_queries(t.num)
            kps = detections.keypoints.data[b, queries]
        labels.append(t.elements.labels)
        keypoints.append(kps)
        scene_index.append(np.full(t.num, b, dtype=np.int64))
    if not labels:
        return None
    return build_condition(
        np.concatenate(labels),
        np.concatenate(keypoints),
        model.grid,
        np.concatenate(scene_index),
    )


def generator_loss(
    model: MapModel,
    features: BEVFeatureGrid,
    targets: Sequence[SceneTargets],
    cond,
    augmentation: Optional[Augmentation] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Teacher-forced NLL over all GT elements of the batch."""
    if cond is None:
        return T.as_tensor(0.0)
    sequences = [s for t in targets for s in t.sequences]
    inputs = None
    if augmentation is not None and augmentation.active:
        inputs = [
            augment_inputs(v, model.grid, augmentation.prob, augmentation.sigma_m, augmentation.rng)
            for t in targets
            for v in t.vertices
        ]
    return teacher_forced_nll(model.generator, cond, sequences, features, inputs, rng)


def compute_loss(
    model: MapModel,
    rasters: np.ndarray,
    targets: Sequence[SceneTargets],
    stage: int = 1,
    augmentation: Optional[Augmentation] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[LossBreakdown, List[Assignment]]:
    """
    Total loss L = L_det + L_gen of a batch.

    Args:
        model: Network
        rasters: (B, C, H, W) inputs
        targets: One SceneTargets per raster
        stage: 1 conditions the generator on GT keypoints, 2 on the detector
            keypoints of the matched queries (detached)
        augmentation: Input vertex noise for the generator
        rng: Dropout generator

    Returns:
        (loss breakdown, per-sample assignments)
    """
    features = model.encoder(rasters, rng)
    detections = model.detector(features, rng)
    det, assignments, parts = detector_set_loss(detections, [t.elements for t in targets])
    if stage == 1:
        cond = generator_conditions(model, targets)
    elif stage == 2:
        cond = generator_conditions(model, targets, detections, assignments)
    else:
        raise ValueError(f"unknown training stage {stage}")
    gen = generator_loss(model, features, targets, cond, augmentation, rng)
    total = T.add(det, gen)
    return LossBreakdown(total=total, det=det, gen=gen, det_parts=parts), assignments


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class PredictionDiagnostics:
    """Counts from one predict_map call."""

    attempted: int = 0
    decoded: int = 0
    overflow: int = 0
    degenerate: int = 0

    def merge(self, other: "PredictionDiagnostics") -> "PredictionDiagnostics":
        return PredictionDiagnostics(
            attempted=self.attempted + other.attempted,
            decoded=self.decoded + other.decoded,
            overflow=self.overflow + other.overflow,
            degenerate=self.degenerate + other.degenerate,
        )


@dataclass
class DecodeOptions:
    mode: DecodeMode = DecodeMode.GREEDY
    temperature: float = 1.0
    rng: Optional[np.random.Generator] = field(default=None, repr=False)


def predict_map(
    model: MapModel,
    raster: np.ndarray,
    score_threshold: float = 0.3,
    scene_id: str = "scene",
    options: Optional[DecodeOptions] = None,
) -> Tuple[PredictedMap, PredictionDiagnostics]:
    """
    Detect elements, then decode a polyline for every confident detection.

    Args:
        model: Trained network
        raster: (C, H, W) input
        score_threshold: Minimum detection score
        scene_id: Scene id stamped on predictions
        options: Decoding mode

    Returns:
        (predicted map, diagnostics); degenerate decodes are dropped
    """
    options = options or DecodeOptions()
    diag = PredictionDiagnostics()
    with no_grad(), eval_mode():
        features = model.encoder(np.asarray(raster)[None])
        detections = model.detector(features)
        scores = detections.scores()[0]
        labels = detections.labels()[0]
        keep = np.flatnonzero(scores >= score_threshold)
        diag.attempted = len(keep)
        if not len(keep):
            return PredictedMap(scene_id=scene_id), diag

        cond = build_condition(labels[keep], detections.keypoints.data[0, keep], model.grid)
        results = decode_polyline(
            model.generator,
            cond,
            features,
            mode=options.mode,
            temperature=options.temperature,
            rng=options.rng,
        )

    predictions = []
    for q, result in zip(keep, results):
        diag.overflow += int(result.overflow)
        label = MapClass.from_index(int(labels[q]))
        try:
            poly = tokens_to_polyline(result.tokens, model.grid, closed=label.is_closed)
        except (TokenDecodeError, InvalidPolylineError):
            diag.degenerate += 1
            continue
        element = MapElement(label=label, polyline=poly)
        score = float(min(max(scores[q], 0.0), 1.0))
        predictions.append(ScoredPrediction(element=element, score=score, scene_id=scene_id))
    diag.decoded = len(predictions)
    return PredictedMap(scene_id=scene_id, predictions=tuple(predictions)), diag


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def model_arrays(
    model: MapModel, optim_state: Optional[OptimState] = None
) -> Dict[str, np.ndarray]:
    arrays = {MODEL_PREFIX + name: a for name, a in model.state_dict().items()}
    if optim_state is not None:
        arrays.update(optim_state.to_arrays())
    return arrays


def save_model(
    path: Path,
    model: MapModel,
    config: RunConfig,
    meta: Optional[Dict[str, Any]] = None,
    optim_state: Optional[OptimState] = None,
) -> Path:
    """Write model (and optimizer) state with the flat run configuration."""
    return save_checkpoint(path, model_arrays(model, optim_state), config.to_flat(), meta)


def load_model(path: Path) -> Tuple[MapModel, RunConfig, Dict[str, Any]]:
    """
    Rebuild a model from a checkpoint.

    Returns:
        (model, run configuration, checkpoint header)

    Raises:
        DatasetError: If the checkpoint is unreadable or inconsistent
    """
    arrays, header = load_checkpoint(path)
    config = RunConfig.from_flat(header.get("config") or {})
    model = MapModel(config.model, seed=config.train.seed)
    state = {k[len(MODEL_PREFIX) :]: v for k, v in arrays.items() if k.startswith(MODEL_PREFIX)}
    try:
        model.load_state_dict(state)
    except ShapeError as e:
        raise DatasetError(f"checkpoint {path} does not fit its configuration: {e}") from e
    return model, config, header


def load_optim_state(path: Path) -> OptimState:
    arrays, _ = load_checkpoint(path)
    return OptimState.from_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
