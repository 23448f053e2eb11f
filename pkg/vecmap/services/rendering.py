"""
SVG rendering of ground-truth and predicted maps.

Ground truth is drawn dashed, predictions solid, one color per class; an
arrowhead at the end of every path marks the vertex order.
"""

import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import numpy as np

from vecmap.models.schemas import GridSpec, MapClass, MapElement, PredictedMap, VectorMap
from vecmap.utils.errors import DatasetError

logger = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"
CLASS_COLORS = {
    MapClass.PED_CROSSING: "#1f77b4",
    MapClass.DIVIDER: "#ff7f0e",
    MapClass.BOUNDARY: "#2ca02c",
}
PAD_PX = 20.0
LEGEND_W_PX = 150.0

MapLike = Union[VectorMap, PredictedMap]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    """Meter-to-pixel transform with y pointing up on screen."""

    def __init__(self, grid: GridSpec, px_per_m: float):
        self.grid = grid
        self.k = px_per_m
        self.width = grid.width_m * px_per_m + 2 * PAD_PX + LEGEND_W_PX
        self.height = grid.height_m * px_per_m + 2 * PAD_PX

    def xy(self, x: float, y: float) -> Tuple[float, float]:
        return (
            PAD_PX + (x - self.grid.x_min) * self.k,
            PAD_PX + (self.grid.y_max - y) * self.k,
        )


def path_data(points: np.ndarray, closed: bool, canvas: _Canvas) -> str:
    """SVG path commands; closed rings end with Z instead of the repeated vertex."""
    pts = points[:-1] if closed else points
    coords = [canvas.xy(x, y) for x, y in pts]
    parts = [f"M {_fmt(coords[0][0])},{_fmt(coords[0][1])}"]
    parts += [f"L {_fmt(x)},{_fmt(y)}" for x, y in coords[1:]]
    if closed:
        parts.append("Z")
    return " ".join(parts)


def _elements(vmap: Optional[MapLike]) -> Iterable[MapElement]:
    if vmap is None:
        return ()
    if isinstance(vmap, PredictedMap):
        return tuple(p.element for p in vmap.predictions)
    return vmap.elements


def _defs(root: ET.Element) -> None:
    defs = ET.SubElement(root, "defs")
    for label in CLASS_COLORS:
        marker = ET.SubElement(
            defs,
            "marker",
            id=f"arrow-{label.short_name}",
            viewBox="0 0 10 10",
            refX="9",
            refY="5",
            markerWidth="6",
            markerHeight="6",
            orient="auto",
        )
        ET.SubElement(marker, "path", d="M 0 0 L 10 5 L 0 10 z", fill=CLASS_COLORS[label])


def _draw(group: ET.Element, elements: Iterable[MapElement], canvas: _Canvas, dashed: bool):
    for element in elements:
        attrs = {
            "d": path_data(element.polyline.array(), element.polyline.closed, canvas),
            "fill": "none",
            "stroke": CLASS_COLORS[element.label],
            "stroke-width": "2",
            "marker-end": f"url(#arrow-{element.label.short_name})",
            "class": element.label.value,
        }
        if dashed:
            attrs["stroke-dasharray"] = "6,4"
        ET.SubElement(group, "path", attrs)


def _legend(root: ET.Element, canvas: _Canvas) -> None:
    x0 = canvas.width - LEGEND_W_PX + 10
    legend = ET.SubElement(root, "g", id="legend", attrib={"font-size": "12"})
    rows = [(label.value, CLASS_COLORS[label], None) for label in CLASS_COLORS]
    rows += [("ground truth", "#000000", "6,4"), ("prediction", "#000000", None)]
    for i, (text, color, dash) in enumerate(rows):
        y = PAD_PX + 10 + 18 * i
        attrs = {
            "x1": _fmt(x0),
            "y1": _fmt(y),
            "x2": _fmt(x0 + 24),
            "y2": _fmt(y),
            "stroke": color,
            "stroke-width": "2",
        }
        if dash:
            attrs["stroke-dasharray"] = dash
        ET.SubElement(legend, "line", attrs)
        label = ET.SubElement(legend, "text", x=_fmt(x0 + 30), y=_fmt(y + 4))
        label.text = text


def svg_document(
    grid: GridSpec,
    gt: Optional[MapLike] = None,
    pred: Optional[MapLike] = None,
    px_per_m: float = 20.0,
    title: Optional[str] = None,
) -> str:
    """
    Build the SVG text for a GT and/or predicted map.

    Returns:
        Serialized SVG document
    """
    canvas = _Canvas(grid, px_per_m)
    root = ET.Element(
        "svg",
        xmlns=SVG_NS,
        width=_fmt(canvas.width),
        height=_fmt(canvas.height),
        viewBox=f"0 0 {_fmt(canvas.width)} {_fmt(canvas.height)}",
    )
    if title:
        ET.SubElement(root, "title").text = title
    _defs(root)
    x0, y0 = canvas.xy(grid.x_min, grid.y_max)
    ET.SubElement(
        root,
        "rect",
        id="frame",
        x=_fmt(x0),
        y=_fmt(y0),
        width=_fmt(grid.width_m * px_per_m),
        height=_fmt(grid.height_m * px_per_m),
        fill="none",
        stroke="#808080",
        attrib={"stroke-width": "1"},
    )
    _draw(ET.SubElement(root, "g", id="ground-truth"), _elements(gt), canvas, dashed=True)
    _draw(ET.SubElement(root, "g", id="prediction"), _elements(pred), canvas, dashed=False)
    _legend(root, canvas)
    return ET.tostring(root, encoding="unicode")


def render_svg(
    out_path: Path,
    grid: GridSpec,
    gt: Optional[MapLike] = None,
    pred: Optional[MapLike] = None,
    px_per_m: float = 20.0,
    title: Optional[str] = None,
) -> Path:
    """
    Write an SVG figure of the given maps.

    Args:
        out_path: Destination file
        grid: Map extent to frame
        gt: Ground-truth map (dashed)
        pred: Predicted map (solid)
        px_per_m: Drawing scale
        title: Optional document title

    Returns:
        The written path
    """
    out_path = Path(out_path)
    text = svg_document(grid, gt, pred, px_per_m, title)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text('<?xml version="1.0" encoding="UTF-8"?>\n' + text + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write {out_path}: {e}") from e
    logger.info(f"Rendered {out_path}")
    return out_path
