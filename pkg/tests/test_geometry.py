"""Tests for polyline geometry, keypoints and tokenization."""

import math

import numpy as np
import pytest

from vecmap.models.schemas import GridSpec, KeypointRepr, KeypointSet, Polyline, VertexTokenSeq
from vecmap.services.geometry import (
    ResampleStrategy,
    bbox_iou,
    canonicalize_closed,
    dequantize_points,
    dequantize_vertex,
    extract_keypoints,
    flatten_to_tokens,
    quantize_points,
    quantize_vertex,
    rdp_simplify,
    resample,
    signed_area,
    simplify_to_budget,
    tokens_to_polyline,
    uniform_points,
)
from vecmap.utils.errors import InvalidPolylineError, TokenDecodeError


def poly(points, closed=False) -> Polyline:
    return Polyline.from_points(points, closed=closed)


def random_polyline(rng: np.random.Generator, n: int, lo: float, hi: float) -> Polyline:
    while True:
        pts = rng.uniform(lo, hi, size=(n, 2))
        if np.all(np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-6):
            return poly(pts)


@pytest.mark.unit
class TestPolyline:
    """Test suite for the Polyline schema."""

    def test_requires_two_vertices(self):
        """Test single-vertex polylines are rejected."""
        with pytest.raises(InvalidPolylineError):
            poly([(0.0, 0.0)])

    def test_rejects_consecutive_duplicates(self):
        """Test repeated consecutive vertices are rejected."""
        with pytest.raises(InvalidPolylineError):
            poly([(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])

    def test_closed_requires_repeated_first_vertex(self):
        """Test closed polylines must end on their first vertex."""
        with pytest.raises(InvalidPolylineError):
            poly([(0, 0), (1, 0), (1, 1)], closed=True)
        ring = poly([(0, 0), (1, 0), (1, 1), (0, 0)], closed=True)
        assert ring.num_vertices == 4

    def test_length_and_reverse(self):
        """Test arc length and reversal."""
        p = poly([(0, 0), (3, 0), (3, 4)])
        assert p.length() == pytest.approx(7.0)
        assert p.reversed().vertices == ((3.0, 4.0), (3.0, 0.0), (0.0, 0.0))


@pytest.mark.unit
class TestRdpSimplify:
    """Test suite for Ramer-Douglas-Peucker simplification."""

    def test_collinear_midpoint_removed(self):
        """Test a collinear interior vertex is dropped."""
        out = rdp_simplify(poly([(0, 0), (1, 0), (2, 0)]), 0.01)
        assert out.vertices == ((0.0, 0.0), (2.0, 0.0))

    def test_zero_epsilon_is_identity(self):
        """Test epsilon 0 returns the input unchanged."""
        p = poly([(0, 0), (1, 0.001), (2, 0)])
        assert rdp_simplify(p, 0.0) == p

    def test_apex_against_threshold(self):
        """Test the apex survives only when its deviation exceeds epsilon."""
        low = rdp_simplify(poly([(0, 0), (1, 0.5), (2, 0)]), 0.55)
        high = rdp_simplify(poly([(0, 0), (1, 0.6), (2, 0)]), 0.55)
        assert low.vertices == ((0.0, 0.0), (2.0, 0.0))
        assert high.num_vertices == 3

    def test_idempotent(self, rng):
        """Test simplifying a simplified polyline changes nothing."""
        for _ in range(20):
            p = random_polyline(rng, 12, 0.0, 10.0)
            once = rdp_simplify(p, 0.8)
            assert rdp_simplify(once, 0.8) == once

    def test_output_is_subsequence_with_endpoints(self, rng):
        """Test kept vertices are an ordered subsequence including both endpoints."""
        p = random_polyline(rng, 15, 0.0, 5.0)
        out = rdp_simplify(p, 0.5)
        assert out.vertices[0] == p.vertices[0]
        assert out.vertices[-1] == p.vertices[-1]
        it = iter(p.vertices)
        assert all(v in it for v in out.vertices)

    def test_negative_epsilon_rejected(self):
        """Test negative tolerances raise."""
        with pytest.raises(ValueError):
            rdp_simplify(poly([(0, 0), (1, 0)]), -1.0)

    def test_budget_is_met(self, rng):
        """Test simplify_to_budget respects the vertex budget."""
        p = random_polyline(rng, 40, 0.0, 10.0)
        assert simplify_to_budget(p, 6, epsilon_m=0.01).num_vertices <= 6


@pytest.mark.unit
class TestResample:
    """Test suite for arc-length resampling."""

    def test_uniform_midpoint(self):
        """Test UNIFORM(3) on a segment adds its midpoint."""
        out = resample(poly([(0, 0), (2, 0)]), ResampleStrategy.uniform(3))
        assert out.vertices == ((0.0, 0.0), (1.0, 0.0), (2.0, 0.0))

    def test_fixed_interval(self):
        """Test FIXED_INTERVAL walks the arc and appends the endpoint."""
        out = resample(poly([(0, 0), (2.5, 0)]), ResampleStrategy.fixed_interval(1.0))
        np.testing.assert_allclose(out.array(), [[0, 0], [1, 0], [2, 0], [2.5, 0]])

    def test_curvature_keeps_right_angle(self):
        """Test CURVATURE keeps a vertex whose turn exceeds the threshold."""
        p = poly([(0, 0), (1, 0), (1, 1)])
        assert resample(p, ResampleStrategy.curvature(0.1)).num_vertices == 3

    def test_curvature_drops_straight_vertex(self):
        """Test CURVATURE drops vertices on a straight run."""
        p = poly([(0, 0), (1, 0), (2, 0), (2, 1)])
        out = resample(p, ResampleStrategy.curvature(math.radians(5)))
        assert out.vertices == ((0.0, 0.0), (2.0, 0.0), (2.0, 1.0))

    def test_uniform_count_and_endpoints(self, rng):
        """Test UNIFORM(n) yields n vertices and keeps endpoints exactly."""
        for n in (2, 5, 17):
            p = random_polyline(rng, 7, -3.0, 3.0)
            out = uniform_points(p.array(), n)
            assert len(out) == n
            assert tuple(out[0]) == p.vertices[0]
            assert tuple(out[-1]) == p.vertices[-1]

    def test_zero_length_rejected(self):
        """Test a polyline with zero arc length cannot be resampled."""
        with pytest.raises(InvalidPolylineError):
            uniform_points(np.array([[1.0, 1.0], [1.0, 1.0]]), 4)


@pytest.mark.unit
class TestKeypoints:
    """Test suite for keypoint extraction and box IoU."""

    def test_bbox(self):
        """Test BBOX is (min corner, max corner)."""
        kps = extract_keypoints(poly([(0, 0), (2, 1), (1, 3)]), KeypointRepr.BBOX)
        assert kps.points == ((0.0, 0.0), (2.0, 3.0))

    def test_sme(self):
        """Test SME is start, arc-length midpoint, end."""
        kps = extract_keypoints(poly([(0, 0), (4, 0)]), KeypointRepr.SME)
        assert kps.points == ((0.0, 0.0), (2.0, 0.0), (4.0, 0.0))

    def test_extreme(self):
        """Test EXTREME order is left, right, top, bottom."""
        kps = extract_keypoints(poly([(0, 1), (2, 0), (3, 2)]), KeypointRepr.EXTREME)
        assert kps.points == ((0.0, 1.0), (3.0, 2.0), (3.0, 2.0), (2.0, 0.0))

    def test_bbox_reversal_invariant_sme_not(self):
        """Test BBOX ignores direction while SME swaps start and end."""
        p = poly([(0, 0), (1, 2), (4, 1)])
        bbox = extract_keypoints(p, KeypointRepr.BBOX)
        assert extract_keypoints(p.reversed(), KeypointRepr.BBOX) == bbox
        sme = extract_keypoints(p, KeypointRepr.SME).array()
        sme_rev = extract_keypoints(p.reversed(), KeypointRepr.SME).array()
        np.testing.assert_allclose(sme_rev[0], sme[2])
        assert not np.allclose(sme_rev, sme)

    def test_keypoint_count_validated(self):
        """Test KeypointSet rejects the wrong number of points."""
        with pytest.raises(ValueError):
            KeypointSet(repr_kind=KeypointRepr.SME, points=[(0, 0), (1, 1)])

    def test_iou_identical(self):
        """Test identical boxes have IoU 1."""
        a = np.array([[0.0, 0.0], [2.0, 2.0]])
        assert bbox_iou(a, a) == pytest.approx(1.0)

    def test_iou_partial_overlap(self):
        """Test (0,0)-(2,2) vs (1,1)-(3,3) gives 1/7."""
        a = np.array([[0.0, 0.0], [2.0, 2.0]])
        b = np.array([[1.0, 1.0], [3.0, 3.0]])
        assert bbox_iou(a, b) == pytest.approx(1.0 / 7.0)

    def test_iou_disjoint(self):
        """Test disjoint boxes have IoU 0."""
        a = np.array([[0.0, 0.0], [1.0, 1.0]])
        b = np.array([[5.0, 5.0], [6.0, 6.0]])
        assert bbox_iou(a, b) == 0.0

    def test_iou_degenerate_box_defined(self):
        """Test a flat box still yields a finite IoU with itself."""
        flat = np.array([[0.0, 0.0], [4.0, 0.0]])
        assert bbox_iou(flat, flat) == pytest.approx(1.0)


@pytest.mark.unit
class TestQuantization:
    """Test suite for grid quantization and vertex tokens."""

    @pytest.fixture
    def grid03(self) -> GridSpec:
        """10x10 grid of 0.3 m cells at the origin."""
        return GridSpec(width_cells=10, height_cells=10, cell_m=0.3, origin=(0.0, 0.0))

    def test_floor_binning(self, grid03):
        """Test (0.45, 0) falls in cell (1, 0)."""
        assert quantize_vertex((0.45, 0.0), grid03) == (1, 0)

    def test_origin_and_cell_center(self, grid03):
        """Test the origin maps to cell (0, 0) whose center is (0.15, 0.15)."""
        assert quantize_vertex((0.0, 0.0), grid03) == (0, 0)
        assert dequantize_vertex(0, 0, grid03) == pytest.approx((0.15, 0.15))

    def test_clamping(self, grid03):
        """Test out-of-range points clamp to the border cells."""
        assert quantize_vertex((-5.0, 99.0), grid03) == (0, 9)

    def test_quantize_idempotent(self, rng, grid03):
        """Test quantize(dequantize(quantize(p))) == quantize(p)."""
        pts = rng.uniform(-1.0, 4.0, size=(200, 2))
        cells = quantize_points(pts, grid03)
        back = quantize_points(dequantize_points(cells, grid03), grid03)
        np.testing.assert_array_equal(back, cells)

    def test_flatten_tokens(self, unit_grid):
        """Test per-coordinate floor tokens followed by EOS."""
        seq = flatten_to_tokens(poly([(0.2, 0.2), (3.4, 5.6)]), unit_grid)
        assert seq.tokens == (0, 0, 3, 5, 10)

    def test_eos_only_is_degenerate(self, unit_grid):
        """Test decoding [EOS] alone raises."""
        with pytest.raises(TokenDecodeError):
            tokens_to_polyline([10], unit_grid)

    def test_malformed_sequences(self, unit_grid):
        """Test odd coordinate counts and out-of-vocabulary tokens raise."""
        with pytest.raises(TokenDecodeError):
            VertexTokenSeq(tokens=(1, 2, 3, 10), eos_id=10)
        with pytest.raises(TokenDecodeError):
            VertexTokenSeq(tokens=(1, 11, 10), eos_id=10)
        with pytest.raises(TokenDecodeError):
            tokens_to_polyline([1, 2, 3], unit_grid)

    def test_round_trip_half_cell(self, rng, unit_grid):
        """Test round trips stay within half a cell per axis."""
        for _ in range(50):
            p = random_polyline(rng, 5, 0.0, 9.99)
            seq = flatten_to_tokens(p, unit_grid)
            cells = quantize_points(p.array(), unit_grid)
            if np.any(np.all(cells[1:] == cells[:-1], axis=1)):
                continue
            back = tokens_to_polyline(seq, unit_grid)
            assert np.max(np.abs(back.array() - p.array())) <= 0.5 + 1e-12

    def test_vertex_budget(self, unit_grid):
        """Test flattening respects the vertex budget."""
        p = poly([(0.5, 0.5), (1.5, 1.5), (2.5, 2.5)])
        with pytest.raises(InvalidPolylineError):
            flatten_to_tokens(p, unit_grid, n_v_max=2)

    def test_closed_round_trip(self, unit_grid):
        """Test closed rings drop the closing vertex and decoding restores it."""
        ring = poly([(1.5, 1.5), (4.5, 1.5), (4.5, 3.5), (1.5, 1.5)], closed=True)
        seq = flatten_to_tokens(ring, unit_grid)
        assert seq.num_vertices == 3
        back = tokens_to_polyline(seq, unit_grid, closed=True)
        assert back.closed
        np.testing.assert_allclose(back.array(), ring.array())


@pytest.mark.unit
class TestCanonicalizeClosed:
    """Test suite for closed-polygon canonicalization."""

    def test_orientation_and_start(self):
        """Test clockwise rings are reversed and start at the smallest vertex."""
        cw = [(2, 2), (2, 0), (0, 0), (0, 2)]
        ring = canonicalize_closed(np.array(cw, dtype=float))
        assert ring.closed
        assert ring.vertices[0] == (0.0, 0.0)
        assert ring.vertices[-1] == (0.0, 0.0)
        assert signed_area(ring.array()[:-1]) > 0

    def test_accepts_repeated_vertex(self):
        """Test input already carrying the closing vertex is handled."""
        ring = canonicalize_closed(np.array([(0, 0), (1, 0), (0, 1), (0, 0)], dtype=float))
        assert ring.num_vertices == 4
