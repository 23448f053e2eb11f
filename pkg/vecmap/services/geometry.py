"""
Polyline geometry service for vecmap.

This module provides:
- Ramer-Douglas-Peucker simplification and vertex-budget capping
- Arc-length resampling (uniform, fixed interval, curvature-driven)
- Keypoint extraction (bounding box, start-middle-end, extreme points)
- Grid quantization and vertex tokenization with EOS
- Axis-aligned box IoU between keypoint sets
- Closed-polygon canonicalization (counter-clockwise, lexicographic start)

All functions are pure and operate on immutable inputs.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from vecmap.models.schemas import GridSpec, KeypointRepr, KeypointSet, Polyline, VertexTokenSeq
from vecmap.utils.errors import InvalidPolylineError, TokenDecodeError

logger = logging.getLogger(__name__)

# Boxes thinner than this are widened symmetrically so IoU stays defined.
MIN_BOX_SIDE_M = 0.01


class SamplingKind(str, Enum):
    """Resampling strategy family."""

    UNIFORM = "uniform"
    FIXED_INTERVAL = "fixed_interval"
    CURVATURE = "curvature"


@dataclass(frozen=True)
class ResampleStrategy:
    """Resampling strategy and its parameter (n, d_m or theta_rad)."""

    kind: SamplingKind
    value: float

    @classmethod
    def uniform(cls, n: int) -> "ResampleStrategy":
        return cls(SamplingKind.UNIFORM, float(n))

    @classmethod
    def fixed_interval(cls, d_m: float) -> "ResampleStrategy":
        return cls(SamplingKind.FIXED_INTERVAL, float(d_m))

    @classmethod
    def curvature(cls, theta_rad: float) -> "ResampleStrategy":
        return cls(SamplingKind.CURVATURE, float(theta_rad))


# ---------------------------------------------------------------------------
# Simplification
# ---------------------------------------------------------------------------


def _segment_distances(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Distance of each point to the segment start-end."""
    seg = end - start
    seg_len2 = float(seg @ seg)
    rel = points - start
    if seg_len2 == 0.0:
        return np.linalg.norm(rel, axis=1)
    t = np.clip(rel @ seg / seg_len2, 0.0, 1.0)
    proj = start + t[:, None] * seg
    return np.linalg.norm(points - proj, axis=1)


def _rdp_mask(points: np.ndarray, epsilon: float) -> np.ndarray:
    """Keep-mask of the RDP recursion, evaluated with an explicit stack."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        dists = _segment_distances(points[lo + 1 : hi], points[lo], points[hi])
        idx = int(np.argmax(dists))
        if dists[idx] > epsilon:
            split = lo + 1 + idx
            keep[split] = True
            stack.append((lo, split))
            stack.append((split, hi))
    return keep


def rdp_simplify(poly: Polyline, epsilon_m: float) -> Polyline:
    """
    Simplify a polyline with the Ramer-Douglas-Peucker algorithm.

    Args:
        poly: Input polyline
        epsilon_m: Maximum allowed deviation of a dropped vertex (meters)

    Returns:
        Polyline whose vertices are a subsequence of the input
    """
    if epsilon_m < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon_m}")
    points = poly.array()
    if len(points) < 2:
        raise InvalidPolylineError("rdp_simplify needs at least 2 vertices")
    if epsilon_m == 0 or len(points) == 2:
        return poly

    if poly.closed:
        # The closing chord has zero length; anchor on the vertex farthest from the start.
        far = int(np.argmax(np.linalg.norm(points - points[0], axis=1)))
        keep = np.zeros(len(points), dtype=bool)
        keep[: far + 1] |= _rdp_mask(points[: far + 1], epsilon_m)
        keep[far:] |= _rdp_mask(points[far:], epsilon_m)
    else:
        keep = _rdp_mask(points, epsilon_m)

    return Polyline.from_points(points[keep], closed=poly.closed)


def simplify_to_budget(
    poly: Polyline,
    max_vertices: int,
    epsilon_m: float = 0.05,
    growth: float = 1.5,
) -> Polyline:
    """
    Simplify with RDP, growing epsilon until the vertex budget is met.

    Closed polylines count distinct vertices (the closing repeat is free).

    Args:
        poly: Input polyline
        max_vertices: Vertex budget
        epsilon_m: Initial RDP tolerance
        growth: Multiplicative epsilon growth per retry

    Returns:
        Simplified polyline within budget
    """
    extra = 1 if poly.closed else 0
    result = rdp_simplify(poly, epsilon_m)
    eps = epsilon_m
    for _ in range(64):
        if result.num_vertices - extra <= max_vertices:
            return result
        eps *= growth
        result = rdp_simplify(poly, eps)
    logger.warning(f"RDP could not meet budget {max_vertices}; falling back to uniform resampling")
    return resample(poly, ResampleStrategy.uniform(max_vertices + extra))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _arc_lengths(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length at every vertex."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate(([0.0], np.cumsum(seg)))


def _interpolate(points: np.ndarray, arc: np.ndarray, stations: np.ndarray) -> np.ndarray:
    """Points at the given arc-length stations."""
    x = np.interp(stations, arc, points[:, 0])
    y = np.interp(stations, arc, points[:, 1])
    return np.stack([x, y], axis=1)


def uniform_points(points: np.ndarray, n: int) -> np.ndarray:
    """
    Resample a vertex array to n points at equal arc-length spacing.

    Args:
        points: (N, 2) vertices
        n: Number of output points (>= 2)

    Returns:
        (n, 2) array whose first and last rows equal the input endpoints
    """
    if n < 2:
        raise ValueError(f"uniform resampling needs n >= 2, got {n}")
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise InvalidPolylineError("resampling needs at least 2 vertices")
    arc = _arc_lengths(points)
    total = arc[-1]
    if not total > 0:
        raise InvalidPolylineError("cannot resample a zero-length polyline")
    out = _interpolate(points, arc, np.linspace(0.0, total, n))
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def _fixed_interval_points(points: np.ndarray, d_m: float) -> np.ndarray:
    arc = _arc_lengths(points)
    total = arc[-1]
    if not total > 0:
        raise InvalidPolylineError("cannot resample a zero-length polyline")
    count = int(math.floor(total / d_m))
    stations = d_m * np.arange(count + 1)
    stations = stations[stations < total - 1e-9 * max(total, 1.0)]
    out = _interpolate(points, arc, stations)
    return np.vstack([out, points[-1:]])


def turn_angles(points: np.ndarray) -> np.ndarray:
    """Turn angle (radians) at every interior vertex."""
    seg = np.diff(points, axis=0)
    a, b = seg[:-1], seg[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.einsum("ij,ij->i", a, b)
    return np.arctan2(np.abs(cross), dot)


def _curvature_points(points: np.ndarray, theta_rad: float) -> np.ndarray:
    if not _arc_lengths(points)[-1] > 0:
        raise InvalidPolylineError("cannot resample a zero-length polyline")
    keep = np.ones(len(points), dtype=bool)
    keep[1:-1] = turn_angles(points) > theta_rad
    return points[keep]


def resample(poly: Polyline, strategy: ResampleStrategy) -> Polyline:
    """
    Resample a polyline.

    Args:
        poly: Input polyline
        strategy: UNIFORM(n), FIXED_INTERVAL(d_m) or CURVATURE(theta_rad)

    Returns:
        Resampled polyline with the same closure flag
    """
    points = poly.array()
    if strategy.kind is SamplingKind.UNIFORM:
        out = uniform_points(points, int(strategy.value))
    elif strategy.kind is SamplingKind.FIXED_INTERVAL:
        if strategy.value <= 0:
            raise ValueError(f"interval must be positive, got {strategy.value}")
        out = _fixed_interval_points(points, strategy.value)
    elif strategy.kind is SamplingKind.CURVATURE:
        if strategy.value <= 0:
            raise ValueError(f"curvature threshold must be positive, got {strategy.value}")
        out = _curvature_points(points, strategy.value)
    else:
        raise ValueError(f"unknown sampling strategy {strategy.kind}")
    return Polyline.from_points(out, closed=poly.closed)


# ---------------------------------------------------------------------------
# Keypoints
# ---------------------------------------------------------------------------


def extract_keypoints(poly: Polyline, repr_kind: KeypointRepr) -> KeypointSet:
    """
    Extract the keypoint representation of a polyline.

    Args:
        poly: Input polyline
        repr_kind: BBOX (2 points), SME (3 points) or EXTREME (4 points)

    Returns:
        KeypointSet in the representation's fixed order
    """
    pts = poly.array()
    if repr_kind is KeypointRepr.BBOX:
        kps = [pts.min(axis=0), pts.max(axis=0)]
    elif repr_kind is KeypointRepr.SME:
        arc = _arc_lengths(pts)
        middle = _interpolate(pts, arc, np.array([arc[-1] / 2.0]))[0]
        kps = [pts[0], middle, pts[-1]]
    elif repr_kind is KeypointRepr.EXTREME:
        # argmin/argmax return the earliest vertex on ties
        kps = [
            pts[int(np.argmin(pts[:, 0]))],
            pts[int(np.argmax(pts[:, 0]))],
            pts[int(np.argmax(pts[:, 1]))],
            pts[int(np.argmin(pts[:, 1]))],
        ]
    else:
        raise ValueError(f"unknown keypoint representation {repr_kind}")
    return KeypointSet(repr_kind=repr_kind, points=np.asarray(kps))


def enclosing_box(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Axis-aligned box spanned by points, each side at least MIN_BOX_SIDE_M.

    Args:
        points: (k, 2) array

    Returns:
        (low corner, high corner)
    """
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, MIN_BOX_SIDE_M / 2.0)
    return center - half, center + half


def bbox_iou(a: Union[KeypointSet, np.ndarray], b: Union[KeypointSet, np.ndarray]) -> float:
    """
    Intersection-over-union of the boxes spanned by two keypoint sets.

    Args:
        a: Keypoint set or (k, 2) array
        b: Keypoint set or (k, 2) array

    Returns:
        IoU in [0, 1]
    """
    pa = a.array() if isinstance(a, KeypointSet) else a
    pb = b.array() if isinstance(b, KeypointSet) else b
    lo_a, hi_a = enclosing_box(pa)
    lo_b, hi_b = enclosing_box(pb)
    wh = np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0)
    inter = float(wh[0] * wh[1])
    area_a = float(np.prod(hi_a - lo_a))
    area_b = float(np.prod(hi_b - lo_b))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Quantization and tokens
# ---------------------------------------------------------------------------


def quantize_points(points: np.ndarray, g: GridSpec) -> np.ndarray:
    """Floor-bin (N, 2) meter coordinates into clamped integer cells."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tx = np.floor((pts[:, 0] - g.x_min) / g.cell_m)
    ty = np.floor((pts[:, 1] - g.y_min) / g.cell_m)
    tx = np.clip(tx, 0, g.width_cells - 1)
    ty = np.clip(ty, 0, g.height_cells - 1)
    return np.stack([tx, ty], axis=1).astype(np.int64)


def dequantize_points(cells: np.ndarray, g: GridSpec) -> np.ndarray:
    """Cell centers (meters) of (N, 2) integer cells."""
    cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    x = g.x_min + (cells[:, 0] + 0.5) * g.cell_m
    y = g.y_min + (cells[:, 1] + 0.5) * g.cell_m
    return np.stack([x, y], axis=1)


def quantize_vertex(p: Sequence[float], g: GridSpec) -> Tuple[int, int]:
    """
    Quantize one vertex.

    Args:
        p: (x, y) in meters; out-of-range values clamp to the grid
        g: Grid specification

    Returns:
        (tx, ty) cell indices
    """
    tx, ty = quantize_points(np.asarray(p, dtype=np.float64), g)[0]
    return int(tx), int(ty)


def dequantize_vertex(tx: int, ty: int, g: GridSpec) -> Tuple[float, float]:
    """Center of cell (tx, ty) in meters."""
    x, y = dequantize_points(np.array([[tx, ty]]), g)[0]
    return float(x), float(y)


def flatten_to_tokens(
    poly: Polyline,
    g: GridSpec,
    n_v_max: Optional[int] = None,
) -> VertexTokenSeq:
    """
    Flatten a polyline into [x1, y1, ..., xN, yN, EOS].

    The closing vertex of a closed polyline is not emitted; decoding restores it.

    Args:
        poly: Input polyline
        g: Grid specification
        n_v_max: Optional vertex budget

    Returns:
        Token sequence
    """
    pts = poly.array()
    if poly.closed:
        pts = pts[:-1]
    if n_v_max is not None and len(pts) > n_v_max:
        raise InvalidPolylineError(f"polyline has {len(pts)} vertices, budget is {n_v_max}")
    cells = quantize_points(pts, g)
    tokens = tuple(int(t) for t in cells.reshape(-1)) + (g.eos_id,)
    return VertexTokenSeq(tokens=tokens, eos_id=g.eos_id)


def tokens_to_polyline(
    seq: Union[VertexTokenSeq, Sequence[int]],
    g: GridSpec,
    closed: bool = False,
) -> Polyline:
    """
    Decode a token sequence back into a polyline of cell centers.

    Consecutive vertices falling in the same cell are merged.

    Args:
        seq: Token sequence (validated against the grid)
        g: Grid specification
        closed: Append the first vertex to close the polygon

    Returns:
        Decoded polyline
    """
    if not isinstance(seq, VertexTokenSeq):
        seq = VertexTokenSeq(tokens=tuple(int(t) for t in seq), eos_id=g.eos_id)
    elif seq.eos_id != g.eos_id:
        raise TokenDecodeError(f"EOS id {seq.eos_id} does not match grid EOS {g.eos_id}")
    coords = np.asarray(seq.coordinates, dtype=np.int64).reshape(-1, 2)
    out_of_grid = len(coords) and (
        coords[:, 0].max() >= g.width_cells or coords[:, 1].max() >= g.height_cells
    )
    if out_of_grid:
        raise TokenDecodeError("coordinate token outside the grid")

    kept: List[np.ndarray] = []
    for cell in coords:
        if not kept or not np.array_equal(cell, kept[-1]):
            kept.append(cell)
    if closed and len(kept) > 1 and np.array_equal(kept[0], kept[-1]):
        kept.pop()
    if len(kept) < 2:
        raise TokenDecodeError(f"decoded polyline has {len(kept)} distinct vertices, need 2")

    pts = dequantize_points(np.asarray(kept), g)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    return Polyline.from_points(pts, closed=closed)


# ---------------------------------------------------------------------------
# Closed polygons
# ---------------------------------------------------------------------------


def signed_area(points: np.ndarray) -> float:
    """Shoelace signed area of a ring (positive when counter-clockwise)."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def canonicalize_closed(points: np.ndarray) -> Polyline:
    """
    Canonical closed polyline: counter-clockwise, starting at the
    lexicographically smallest (x, then y) vertex, first vertex repeated.

    Args:
        points: Ring vertices, with or without the closing repeat

    Returns:
        Closed polyline
    """
    ring = np.asarray(points, dtype=np.float64)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 2:
        raise InvalidPolylineError("closed polyline needs at least 2 distinct vertices")
    if signed_area(ring) < 0:
        ring = ring[::-1]
    start = int(np.lexsort((ring[:, 1], ring[:, 0]))[0])
    ring = np.roll(ring, -start, axis=0)
    return Polyline.from_points(np.vstack([ring, ring[:1]]), closed=True)
