"""
Pydantic schemas for vecmap domain data.

This module provides:
- MapClass / KeypointRepr / MetricKind enumerations
- Polyline: ordered 2D vertex sequence in meters (open or closed)
- KeypointSet: fixed-size keypoint abstraction of a polyline
- GridSpec: BEV quantization grid
- VertexTokenSeq: flattened coordinate tokens terminated by EOS
- MapElement / VectorMap: class-labeled polylines of one scene
- ScoredPrediction / PredictedMap / APEntry / APReport: evaluation input and output
"""

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from vecmap.utils.errors import InvalidPolylineError, TokenDecodeError

Point = Tuple[float, float]


class MapClass(str, Enum):
    """Semantic class of a map element."""

    PED_CROSSING = "crossing"
    DIVIDER = "divider"
    BOUNDARY = "boundary"

    @property
    def index(self) -> int:
        """Class id used by the detector and the generator prompt."""
        return _CLASS_ORDER.index(self)

    @property
    def is_closed(self) -> bool:
        """Whether elements of this class are closed polygons."""
        return self is MapClass.PED_CROSSING

    @property
    def short_name(self) -> str:
        """Column label used in AP tables."""
        return {"crossing": "ped", "divider": "divider", "boundary": "boundary"}[self.value]

    @classmethod
    def from_index(cls, index: int) -> "MapClass":
        """Inverse of `index`."""
        return _CLASS_ORDER[index]


_CLASS_ORDER = (MapClass.PED_CROSSING, MapClass.DIVIDER, MapClass.BOUNDARY)
NUM_CLASSES = len(_CLASS_ORDER)
NO_OBJECT = NUM_CLASSES


class KeypointRepr(str, Enum):
    """Keypoint representation of a map element."""

    BBOX = "bbox"
    SME = "sme"
    EXTREME = "extreme"

    @property
    def k(self) -> int:
        """Number of keypoints."""
        return {"bbox": 2, "sme": 3, "extreme": 4}[self.value]

    @property
    def label(self) -> str:
        """Display label for ablation tables."""
        return {"bbox": "Bbox", "sme": "SME", "extreme": "Extreme"}[self.value]


class MetricKind(str, Enum):
    """Curve distance used to decide positive matches."""

    CHAMFER = "chamfer"
    FRECHET = "frechet"


class Polyline(BaseModel):
    """Ordered vertex sequence in meters."""

    model_config = ConfigDict(frozen=True)

    vertices: Tuple[Point, ...]
    closed: bool = False

    @field_validator("vertices", mode="before")
    @classmethod
    def coerce_vertices(cls, v):
        """Accept numpy arrays and nested lists."""
        if isinstance(v, np.ndarray):
            v = v.tolist()
        return tuple((float(p[0]), float(p[1])) for p in v)

    @model_validator(mode="after")
    def check_invariants(self) -> "Polyline":
        """Validate vertex count, closure and consecutive duplicates."""
        verts = self.vertices
        if len(verts) < 2:
            raise ValueError(f"polyline needs at least 2 vertices, got {len(verts)}")
        if not all(math.isfinite(c) for p in verts for c in p):
            raise ValueError("polyline has non-finite coordinates")
        if self.closed:
            if len(verts) < 3:
                raise ValueError("closed polyline needs at least 3 vertices")
            if verts[0] != verts[-1]:
                raise ValueError("closed polyline must repeat its first vertex")
        for a, b in zip(verts[:-1], verts[1:]):
            if a == b:
                raise ValueError(f"consecutive identical vertices at {a}")
        return self

    @classmethod
    def from_points(cls, points, closed: bool = False) -> "Polyline":
        """
        Build a polyline, raising the domain error on invalid input.

        Args:
            points: (N, 2) array-like in meters
            closed: Whether the polyline is a closed polygon

        Returns:
            Validated polyline
        """
        try:
            return cls(vertices=points, closed=closed)
        except ValidationError as e:
            raise InvalidPolylineError(f"invalid polyline: {e.errors()[0]['msg']}") from e

    def array(self) -> np.ndarray:
        """Vertices as an (N, 2) float64 array."""
        return np.asarray(self.vertices, dtype=np.float64)

    @property
    def num_vertices(self) -> int:
        """Number of stored vertices (closing vertex included)."""
        return len(self.vertices)

    def length(self) -> float:
        """Arc length in meters."""
        pts = self.array()
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def reversed(self) -> "Polyline":
        """Same vertices in reverse order."""
        return Polyline(vertices=self.vertices[::-1], closed=self.closed)


class KeypointSet(BaseModel):
    """Fixed-size keypoint abstraction of a polyline."""

    model_config = ConfigDict(frozen=True)

    repr_kind: KeypointRepr
    points: Tuple[Point, ...]

    @field_validator("points", mode="before")
    @classmethod
    def coerce_points(cls, v):
        """Accept numpy arrays and nested lists."""
        if isinstance(v, np.ndarray):
            v = v.tolist()
        return tuple((float(p[0]), float(p[1])) for p in v)

    @model_validator(mode="after")
    def check_invariants(self) -> "KeypointSet":
        """Point count must match the representation; bbox corners ordered."""
        if len(self.points) != self.repr_kind.k:
            raise ValueError(
                f"{self.repr_kind.value} needs {self.repr_kind.k} points, got {len(self.points)}"
            )
        if self.repr_kind is KeypointRepr.BBOX:
            (blx, bly), (trx, try_) = self.points
            if blx > trx or bly > try_:
                raise ValueError("bbox must be stored as (bottom-left, top-right)")
        return self

    def array(self) -> np.ndarray:
        """Points as a (k, 2) array."""
        return np.asarray(self.points, dtype=np.float64)


class GridSpec(BaseModel):
    """Quantization grid over the BEV extent."""

    model_config = ConfigDict(frozen=True)

    width_cells: int = Field(200, ge=2)
    height_cells: int = Field(100, ge=2)
    cell_m: float = Field(0.3, gt=0.0)
    origin: Point = (-30.0, -15.0)

    @property
    def x_min(self) -> float:
        return self.origin[0]

    @property
    def y_min(self) -> float:
        return self.origin[1]

    @property
    def width_m(self) -> float:
        return self.width_cells * self.cell_m

    @property
    def height_m(self) -> float:
        return self.height_cells * self.cell_m

    @property
    def x_max(self) -> float:
        return self.x_min + self.width_m

    @property
    def y_max(self) -> float:
        return self.y_min + self.height_m

    @property
    def num_bins(self) -> int:
        """Shared coordinate vocabulary size V = max(W, H)."""
        return max(self.width_cells, self.height_cells)

    @property
    def eos_id(self) -> int:
        """EOS token id (equals the coordinate vocabulary size)."""
        return self.num_bins

    def contains(self, points: np.ndarray) -> bool:
        """Whether all points lie inside the extent (bounds inclusive)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return bool(
            np.all(pts[:, 0] >= self.x_min)
            and np.all(pts[:, 0] <= self.x_max)
            and np.all(pts[:, 1] >= self.y_min)
            and np.all(pts[:, 1] <= self.y_max)
        )


@dataclass(frozen=True)
class VertexTokenSeq:
    """Flattened vertex tokens [x1, y1, ..., xN, yN, EOS]."""

    tokens: Tuple[int, ...]
    eos_id: int

    def __post_init__(self):
        tokens = self.tokens
        if not tokens or tokens[-1] != self.eos_id:
            raise TokenDecodeError("token sequence must end with EOS")
        if tokens.count(self.eos_id) != 1:
            raise TokenDecodeError("EOS must appear exactly once")
        if (len(tokens) - 1) % 2 != 0:
            raise TokenDecodeError(f"odd coordinate count {len(tokens) - 1} before EOS")
        if any(t < 0 or t > self.eos_id for t in tokens):
            raise TokenDecodeError(f"token outside vocabulary [0, {self.eos_id}]")

    @property
    def num_vertices(self) -> int:
        return (len(self.tokens) - 1) // 2

    @property
    def coordinates(self) -> Tuple[int, ...]:
        """Coordinate tokens without the trailing EOS."""
        return self.tokens[:-1]


class MapElement(BaseModel):
    """Class-labeled polyline."""

    model_config = ConfigDict(frozen=True)

    label: MapClass
    polyline: Polyline

    @model_validator(mode="after")
    def check_closure(self) -> "MapElement":
        """Crossings are closed polygons; dividers and boundaries are open."""
        if self.label.is_closed != self.polyline.closed:
            raise ValueError(f"{self.label.value} must have closed={self.label.is_closed}")
        return self

    def to_json_dict(self) -> Dict:
        """Serialize as {"class", "closed", "vertices"}."""
        return {
            "class": self.label.value,
            "closed": self.polyline.closed,
            "vertices": [[x, y] for x, y in self.polyline.vertices],
        }

    @classmethod
    def from_json_dict(cls, data: Dict) -> "MapElement":
        """Inverse of `to_json_dict`."""
        polyline = Polyline.from_points(data["vertices"], closed=bool(data["closed"]))
        return cls(label=MapClass(data["class"]), polyline=polyline)


class VectorMap(BaseModel):
    """All map elements of one scene."""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    elements: Tuple[MapElement, ...] = ()

    def by_class(self, label: MapClass) -> List[MapElement]:
        """Elements of one class in stored order."""
        return [e for e in self.elements if e.label is label]

    def to_json_dict(self) -> Dict:
        return {
            "scene_id": self.scene_id,
            "elements": [e.to_json_dict() for e in self.elements],
        }

    def to_json(self) -> str:
        """Deterministic JSON text."""
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json_dict(cls, data: Dict) -> "VectorMap":
        return cls(
            scene_id=str(data["scene_id"]),
            elements=tuple(MapElement.from_json_dict(e) for e in data["elements"]),
        )


class ScoredPrediction(BaseModel):
    """Predicted element with its confidence."""

    model_config = ConfigDict(frozen=True)

    element: MapElement
    score: float = Field(..., ge=0.0, le=1.0, allow_inf_nan=False)
    scene_id: str


class PredictedMap(BaseModel):
    """Scored predictions of one scene."""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    predictions: Tuple[ScoredPrediction, ...] = ()

    @model_validator(mode="after")
    def check_scene_ids(self) -> "PredictedMap":
        """Every prediction belongs to this scene."""
        for p in self.predictions:
            if p.scene_id != self.scene_id:
                raise ValueError(f"prediction for scene {p.scene_id} in map {self.scene_id}")
        return self

    def to_vector_map(self) -> VectorMap:
        """Drop scores."""
        return VectorMap(
            scene_id=self.scene_id, elements=tuple(p.element for p in self.predictions)
        )

    @classmethod
    def from_vector_map(cls, vmap: VectorMap, score: float = 1.0) -> "PredictedMap":
        """Wrap ground truth as predictions with a constant score."""
        preds = tuple(
            ScoredPrediction(element=e, score=score, scene_id=vmap.scene_id)
            for e in vmap.elements
        )
        return cls(scene_id=vmap.scene_id, predictions=preds)


class APEntry(BaseModel):
    """AP for one (class, threshold, metric) cell."""

    label: MapClass
    threshold_m: float = Field(..., gt=0.0)
    metric: MetricKind
    ap: float = Field(..., ge=0.0, le=1.0)
    num_gt: int = Field(0, ge=0)
    num_pred: int = Field(0, ge=0)


class APReport(BaseModel):
    """Instance-level AP results for a prediction set."""

    entries: List[APEntry] = Field(default_factory=list)
    mean_ap: Dict[MetricKind, float] = Field(default_factory=dict)
    thresholds: Tuple[float, ...] = (0.5, 1.0, 1.5)
    notes: List[str] = Field(default_factory=list)

    @field_validator("mean_ap")
    @classmethod
    def validate_mean_ap(cls, v):
        """mAP values must lie in [0, 1]."""
        for metric, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"mAP for {metric} out of range: {value}")
        return v

    def get(self, label: MapClass, threshold_m: float, metric: MetricKind) -> float:
        """Look up one AP cell."""
        for entry in self.entries:
            if (
                entry.label is label
                and entry.metric is metric
                and math.isclose(entry.threshold_m, threshold_m)
            ):
                return entry.ap
        raise KeyError(f"no AP entry for {label.value}@{threshold_m} ({metric.value})")

    def class_ap(self, label: MapClass, metric: MetricKind) -> float:
        """Mean AP of one class over thresholds."""
        values = [e.ap for e in self.entries if e.label is label and e.metric is metric]
        return float(np.mean(values)) if values else 0.0

    def metric_at(self, metric: MetricKind, threshold_m: float) -> float:
        """mAP over classes at a single threshold."""
        values = [
            e.ap
            for e in self.entries
            if e.metric is metric and math.isclose(e.threshold_m, threshold_m)
        ]
        return float(np.mean(values)) if values else 0.0

    def to_json(self) -> str:
        """Deterministic JSON text."""
        payload = {
            "thresholds": list(self.thresholds),
            "mean_ap": {k.value: v for k, v in self.mean_ap.items()},
            "entries": [
                {
                    "class": e.label.value,
                    "threshold_m": e.threshold_m,
                    "metric": e.metric.value,
                    "ap": e.ap,
                    "num_gt": e.num_gt,
                    "num_pred": e.num_pred,
                }
                for e in self.entries
            ],
            "notes": list(self.notes),
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_table(self) -> str:
        """Aligned plain-text table: one row per metric, AP averaged over thresholds."""
        header = ["Metric", "AP_ped", "AP_divider", "AP_boundary", "mAP"]
        rows = []
        for metric in sorted(self.mean_ap, key=lambda m: m.value):
            row = [f"{metric.value.capitalize()} AP"]
            for label in _CLASS_ORDER:
                row.append(f"{100.0 * self.class_ap(label, metric):.1f}")
            row.append(f"{100.0 * self.mean_ap[metric]:.1f}")
            rows.append(row)
        return format_table(header, rows)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Render rows as an aligned plain-text table."""
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"


def map_class_names() -> List[str]:
    """Class names in id order."""
    return [c.value for c in _CLASS_ORDER]
