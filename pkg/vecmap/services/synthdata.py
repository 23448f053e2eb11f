"""
Synthetic BEV scenes and datasets.

This module provides:
- gen_scene: procedural road boundaries, lane dividers and pedestrian crossings
- rasterize_scene: per-class anti-aliased strokes with pixel noise and occlusions
- build_dataset: scene JSON + raw raster files + manifest with split membership
- load_dataset / load_scene / load_raster / manifest_hash: dataset access

Dataset layout:
    manifest.json
    scenes/<id>.json          VectorMap JSON
    rasters/<id>.f32          little-endian float32, shape (C, H, W), C order
    rasters/<id>.hdr.json     {"shape", "dtype", "order", "cell_m", "origin"}
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from vecmap.models.config import NoiseConfig, SceneConfig
from vecmap.models.schemas import (
    NUM_CLASSES,
    GridSpec,
    MapClass,
    MapElement,
    Polyline,
    VectorMap,
    map_class_names,
)
from vecmap.services.geometry import canonicalize_closed, simplify_to_budget
from vecmap.utils.errors import ConfigError, DatasetError, InvalidPolylineError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SCENE_SEED_STRIDE = 100000
EDGE_MARGIN_M = 0.25
RASTER_DTYPE = np.dtype("<f4")
SPLITS = ("train", "val")


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _bounds(cfg: SceneConfig) -> Tuple[float, float, float, float]:
    x0, y0 = cfg.origin
    m = EDGE_MARGIN_M
    return x0 + m, y0 + m, x0 + cfg.extent_w_m - m, y0 + cfg.extent_h_m - m


def _smooth(y: np.ndarray, passes: int = 2) -> np.ndarray:
    """Three-tap moving average of interior values; endpoints stay fixed."""
    y = y.copy()
    for _ in range(passes):
        if len(y) > 2:
            y[1:-1] = (y[:-2] + y[1:-1] + y[2:]) / 3.0
    return y


def _random_walk(
    rng: np.random.Generator, cfg: SceneConfig, band: Tuple[float, float]
) -> np.ndarray:
    """Heading random walk from the left edge to the right edge inside a y band."""
    x_lo, _, x_hi, _ = _bounds(cfg)
    lo, hi = band
    y = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    heading = float(np.clip(rng.normal(0.0, 2.0 * cfg.heading_sigma_rad), -0.3, 0.3))
    pts = [(x_lo, y)]
    x = x_lo
    while x < x_hi:
        heading += rng.normal(0.0, cfg.heading_sigma_rad)
        heading = float(np.clip(heading, -cfg.max_heading_rad, cfg.max_heading_rad))
        step_x = cfg.step_m * math.cos(heading)
        if x + step_x >= x_hi:
            frac = (x_hi - x) / step_x
            pts.append((x_hi, y + frac * cfg.step_m * math.sin(heading)))
            break
        x += step_x
        y += cfg.step_m * math.sin(heading)
        if not lo <= y <= hi:
            y = min(max(y, lo), hi)
            heading = -0.5 * heading
        pts.append((x, y))
    arr = np.asarray(pts, dtype=np.float64)
    arr[:, 1] = np.clip(_smooth(arr[:, 1]), lo, hi)
    return arr


def _boundaries(rng: np.random.Generator, cfg: SceneConfig, n: int) -> List[np.ndarray]:
    if n == 0:
        return []
    _, y_lo, _, y_hi = _bounds(cfg)
    edges = np.linspace(y_lo, y_hi, n + 1)
    return [_random_walk(rng, cfg, (edges[i], edges[i + 1])) for i in range(n)]


def _dividers(
    rng: np.random.Generator, cfg: SceneConfig, boundaries: Sequence[np.ndarray], n: int
) -> List[np.ndarray]:
    """Dividers follow a boundary at a lateral offset toward the extent center."""
    x_lo, y_lo, x_hi, y_hi = _bounds(cfg)
    center_y = (y_lo + y_hi) / 2.0
    out = []
    for i in range(n):
        if boundaries:
            ref = boundaries[i % len(boundaries)]
            side = -1.0 if ref[:, 1].mean() > center_y else 1.0
            offset = rng.uniform(cfg.divider_offset_min_m, cfg.divider_offset_max_m)
            tilt = rng.uniform(-0.02, 0.02)
            pts = ref.copy()
            pts[:, 1] = ref[:, 1] + side * (offset + tilt * (ref[:, 0] - ref[0, 0]))
        else:
            y = rng.uniform(y_lo, y_hi)
            slope = rng.uniform(-0.05, 0.05)
            xs = np.linspace(x_lo, x_hi, 3)
            pts = np.stack([xs, y + slope * (xs - x_lo)], axis=1)
        pts[:, 1] = np.clip(pts[:, 1], y_lo, y_hi)
        out.append(pts)
    return out


def _crossings(
    rng: np.random.Generator, cfg: SceneConfig, anchors: Sequence[np.ndarray], n: int
) -> List[np.ndarray]:
    """Jittered rectangles centered on an anchor line (a divider when available)."""
    x_lo, y_lo, x_hi, y_hi = _bounds(cfg)
    half_w, half_d = cfg.crossing_width_m / 2.0, cfg.crossing_depth_m / 2.0
    jitter = 0.05 * min(cfg.crossing_width_m, cfg.crossing_depth_m)
    out = []
    for i in range(n):
        cx_lo, cx_hi = x_lo + half_w, x_hi - half_w
        cx = rng.uniform(cx_lo, cx_hi) if cx_hi > cx_lo else (x_lo + x_hi) / 2.0
        if anchors:
            line = anchors[i % len(anchors)]
            cy = float(np.interp(cx, line[:, 0], line[:, 1]))
        else:
            cy = (y_lo + y_hi) / 2.0
        corners = np.array(
            [
                [cx - half_w, cy - half_d],
                [cx + half_w, cy - half_d],
                [cx + half_w, cy + half_d],
                [cx - half_w, cy + half_d],
            ]
        )
        corners += rng.uniform(-jitter, jitter, size=corners.shape)
        corners[:, 0] = np.clip(corners[:, 0], x_lo, x_hi)
        corners[:, 1] = np.clip(corners[:, 1], y_lo, y_hi)
        out.append(corners)
    return out


def _element(label: MapClass, points: np.ndarray, cfg: SceneConfig) -> Optional[MapElement]:
    try:
        if label.is_closed:
            poly = canonicalize_closed(points)
        else:
            poly = Polyline.from_points(points, closed=False)
        poly = simplify_to_budget(poly, cfg.n_v_max, cfg.rdp_epsilon_m)
    except InvalidPolylineError as e:
        logger.debug(f"Skipping degenerate {label.value}: {e.message}")
        return None
    return MapElement(label=label, polyline=poly)


def gen_scene(seed: int, cfg: SceneConfig, scene_id: Optional[str] = None) -> VectorMap:
    """
    Generate one ground-truth map.

    Args:
        seed: Scene seed; (seed, cfg) determine the result
        cfg: Scene configuration
        scene_id: Id stored in the map (defaults to "seed<seed>")

    Returns:
        VectorMap with boundaries, then dividers, then crossings

    Raises:
        ConfigError: If the extent cannot hold the configured geometry
    """
    x_lo, y_lo, x_hi, y_hi = _bounds(cfg)
    if x_hi <= x_lo or y_hi <= y_lo:
        raise ConfigError(
            f"extent {cfg.extent_w_m}x{cfg.extent_h_m} m is too small for the edge margin"
        )
    rng = np.random.default_rng(seed)
    n_b = int(rng.integers(cfg.boundaries_min, cfg.boundaries_max + 1))
    n_d = int(rng.integers(cfg.dividers_min, cfg.dividers_max + 1))
    n_c = int(rng.integers(cfg.crossings_min, cfg.crossings_max + 1))

    boundaries = _boundaries(rng, cfg, n_b)
    dividers = _dividers(rng, cfg, boundaries, n_d)
    crossings = _crossings(rng, cfg, dividers or boundaries, n_c)

    elements = []
    for label, group in (
        (MapClass.BOUNDARY, boundaries),
        (MapClass.DIVIDER, dividers),
        (MapClass.PED_CROSSING, crossings),
    ):
        for pts in group:
            element = _element(label, pts, cfg)
            if element is not None:
                elements.append(element)
    return VectorMap(scene_id=scene_id or f"seed{seed}", elements=tuple(elements))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def cell_centers(g: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(H, W) arrays of cell-center x and y coordinates in meters."""
    xs = g.x_min + (np.arange(g.width_cells) + 0.5) * g.cell_m
    ys = g.y_min + (np.arange(g.height_cells) + 0.5) * g.cell_m
    return np.meshgrid(xs, ys)


def distance_to_polyline(px: np.ndarray, py: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Distance from every point to the nearest segment of a polyline."""
    best = np.full(px.shape, np.inf)
    for a, b in zip(vertices[:-1], vertices[1:]):
        d = b - a
        denom = float(d @ d)
        if denom == 0.0:
            t = np.zeros(px.shape)
        else:
            t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
        dist = np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))
        best = np.minimum(best, dist)
    return best


def _occlude(raster: np.ndarray, noise_cfg: NoiseConfig, rng: np.random.Generator) -> None:
    _, h, w = raster.shape
    for _ in range(noise_cfg.occlusions):
        area = rng.uniform(0.25, 1.0) * noise_cfg.occlusion_max_frac * h * w
        aspect = rng.uniform(0.5, 2.0)
        rw = int(min(w, max(1, math.floor(math.sqrt(area * aspect)))))
        rh = int(min(h, max(1, math.floor(area / rw))))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        raster[:, y0 : y0 + rh, x0 : x0 + rw] = 0.0


def rasterize_scene(
    vmap: VectorMap,
    g: GridSpec,
    noise_cfg: Optional[NoiseConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Draw a map into a (C, H, W) raster, one channel per class.

    Row j holds y bin j (row 0 at y_min). Stroke intensity falls linearly from
    1 to 0 over the last cell of the stroke radius.

    Args:
        vmap: Map to draw
        g: Raster grid
        noise_cfg: Stroke width, pixel noise and occlusions (clean by default)
        rng: Noise generator

    Returns:
        float64 raster with values in [0, 1]
    """
    noise_cfg = noise_cfg or NoiseConfig.clean()
    rng = rng or np.random.default_rng(0)
    raster = np.zeros((NUM_CLASSES, g.height_cells, g.width_cells), dtype=np.float64)
    px, py = cell_centers(g)
    radius = noise_cfg.stroke_cells / 2.0
    for element in vmap.elements:
        dist_cells = distance_to_polyline(px, py, element.polyline.array()) / g.cell_m
        value = np.clip(radius + 0.5 - dist_cells, 0.0, 1.0)
        channel = element.label.index
        raster[channel] = np.maximum(raster[channel], value)

    if noise_cfg.pixel_sigma > 0:
        raster += rng.normal(0.0, noise_cfg.pixel_sigma, size=raster.shape)
    if noise_cfg.occlusions > 0 and noise_cfg.occlusion_max_frac > 0:
        _occlude(raster, noise_cfg, rng)
    return np.clip(raster, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def split_counts(n_scenes: int, split_ratios: Sequence[float]) -> List[int]:
    """
    Scenes per split; the last split takes the rounding remainder.

    Raises:
        ConfigError: If ratios are negative or do not sum to 1
    """
    ratios = [float(r) for r in split_ratios]
    if not ratios or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    counts = [int(round(n_scenes * r)) for r in ratios[:-1]]
    counts = [min(c, n_scenes) for c in counts]
    counts.append(n_scenes - sum(counts))
    if counts[-1] < 0:
        raise ConfigError(f"split ratios {ratios} over-allocate {n_scenes} scenes")
    return counts


def scene_seed(seed: int, index: int) -> int:
    return seed * SCENE_SEED_STRIDE + index


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as e:
        raise DatasetError(f"cannot write {path}: {e}") from e


def raster_bytes(raster: np.ndarray) -> bytes:
    return np.ascontiguousarray(raster, dtype=RASTER_DTYPE).tobytes()


def build_dataset(
    out_dir: Path,
    n_scenes: int,
    seed: int = 0,
    split_ratios: Sequence[float] = (0.8, 0.2),
    scene_cfg: Optional[SceneConfig] = None,
    noise_cfg: Optional[NoiseConfig] = None,
    grid: Optional[GridSpec] = None,
    max_workers: int = 1,
    progress: bool = False,
) -> Path:
    """
    Generate, rasterize and write a dataset.

    Scene i uses seed `seed * 100000 + i`; splits take consecutive index
    ranges so their seeds never overlap.

    Args:
        out_dir: Dataset directory (created)
        n_scenes: Number of scenes
        seed: Dataset seed
        split_ratios: (train, val) fractions summing to 1
        scene_cfg: Scene generation parameters
        noise_cfg: Rasterization noise
        grid: Raster grid (centered on the extent by default)
        max_workers: Threads used for generation
        progress: Show a progress bar

    Returns:
        Path of the written manifest
    """
    scene_cfg = scene_cfg or SceneConfig()
    noise_cfg = noise_cfg or NoiseConfig()
    if grid is None:
        grid = GridSpec(
            width_cells=int(round(scene_cfg.extent_w_m / 0.3)),
            height_cells=int(round(scene_cfg.extent_h_m / 0.3)),
            cell_m=0.3,
            origin=scene_cfg.origin,
        )
    if n_scenes < 1:
        raise ConfigError(f"n_scenes must be positive, got {n_scenes}")
    counts = split_counts(n_scenes, split_ratios)
    if len(counts) > len(SPLITS):
        raise ConfigError(f"at most {len(SPLITS)} splits are supported")

    out_dir = Path(out_dir)
    try:
        (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
        (out_dir / "rasters").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out_dir}: {e}") from e

    split_of = []
    for name, count in zip(SPLITS, counts):
        split_of.extend([name] * count)

    def one_scene(index: int) -> Dict:
        s = scene_seed(seed, index)
        scene_id = f"scene_{index:05d}"
        vmap = gen_scene(s, scene_cfg, scene_id=scene_id)
        raster = rasterize_scene(vmap, grid, noise_cfg, np.random.default_rng([s, 1]))
        scene_data = vmap.to_json().encode("utf-8")
        raster_data = raster_bytes(raster)
        header = {
            "shape": list(raster.shape),
            "dtype": RASTER_DTYPE.str,
            "order": "C",
            "cell_m": grid.cell_m,
            "origin": list(grid.origin),
        }
        _write(out_dir / "scenes" / f"{scene_id}.json", scene_data)
        _write(out_dir / "rasters" / f"{scene_id}.f32", raster_data)
        _write(
            out_dir / "rasters" / f"{scene_id}.hdr.json",
            json.dumps(header, sort_keys=True).encode("utf-8"),
        )
        return {
            "id": scene_id,
            "seed": s,
            "split": split_of[index],
            "num_elements": len(vmap.elements),
            "scene_sha256": _sha256(scene_data),
            "raster_sha256": _sha256(raster_data),
        }

    indices = range(n_scenes)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            entries = list(
                tqdm(pool.map(one_scene, indices), total=n_scenes, disable=not progress)
            )
    else:
        entries = [one_scene(i) for i in tqdm(indices, disable=not progress)]

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "n_scenes": n_scenes,
        "split_ratios": [float(r) for r in split_ratios],
        "channels": map_class_names(),
        "grid": grid.model_dump(mode="json"),
        "scene_config": scene_cfg.model_dump(mode="json"),
        "noise_config": noise_cfg.model_dump(mode="json"),
        "splits": {name: [e["id"] for e in entries if e["split"] == name] for name in SPLITS},
        "scenes": entries,
    }
    manifest_path = out_dir / "manifest.json"
    _write(manifest_path, json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8"))
    logger.info(
        f"Wrote {n_scenes} scenes to {out_dir} "
        f"({', '.join(f'{n} {c}' for n, c in zip(SPLITS, counts))})"
    )
    return manifest_path


@dataclass
class SyntheticDataset:
    """A dataset directory and its parsed manifest."""

    root: Path
    manifest: Dict

    @property
    def grid(self) -> GridSpec:
        return GridSpec(**self.manifest["grid"])

    def split_ids(self, split: str) -> List[str]:
        """Scene ids of "train", "val" or "all"."""
        if split == "all":
            return [e["id"] for e in self.manifest["scenes"]]
        if split not in self.manifest["splits"]:
            raise DatasetError(f"dataset {self.root} has no split {split!r}")
        return list(self.manifest["splits"][split])

    def scene(self, scene_id: str) -> VectorMap:
        return load_scene(self.root, scene_id)

    def raster(self, scene_id: str) -> np.ndarray:
        return load_raster(self.root, scene_id)


def _read_json(path: Path) -> Dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON in {path}: {e}") from e


def load_dataset(root: Path) -> SyntheticDataset:
    """
    Open a dataset directory.

    Raises:
        DatasetError: If the manifest is missing or of another version
    """
    root = Path(root)
    manifest = _read_json(root / "manifest.json")
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')} in {root}")
    return SyntheticDataset(root=root, manifest=manifest)


def load_scene(root: Path, scene_id: str) -> VectorMap:
    path = Path(root) / "scenes" / f"{scene_id}.json"
    data = _read_json(path)
    try:
        return VectorMap.from_json_dict(data)
    except (KeyError, ValueError) as e:
        raise DatasetError(f"invalid scene {path}: {e}") from e


def load_raster(root: Path, scene_id: str) -> np.ndarray:
    """(C, H, W) float64 raster of a scene."""
    base = Path(root) / "rasters"
    header = _read_json(base / f"{scene_id}.hdr.json")
    path = base / f"{scene_id}.f32"
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(header.get("dtype", RASTER_DTYPE.str))
    if len(raw) != int(np.prod(shape)) * dtype.itemsize:
        raise DatasetError(f"{path} holds {len(raw)} bytes, header expects shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64)


def manifest_hash(root: Path) -> str:
    """SHA-256 of manifest.json (which records every file's SHA-256)."""
    path = Path(root) / "manifest.json"
    try:
        return _sha256(path.read_bytes())
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
