"""Tests for the encoder, detector, generator and end-to-end map network."""

import numpy as np
import pytest

from vecmap.models.config import TargetSampling
from vecmap.models.schemas import NO_OBJECT, KeypointRepr, MapClass, Polyline, VectorMap
from vecmap.network.encoder import feature_extent, patchify
from vecmap.network.generator import (
    DecodeMode,
    _allowed_mask,
    build_condition,
    decode_polyline,
    generator_step,
    teacher_forced_nll,
)
from vecmap.network.mapnet import (
    DecodeOptions,
    augment_inputs,
    build_model,
    compute_loss,
    load_model,
    predict_map,
    prepare_targets,
    sample_target,
    save_model,
    target_tokens,
)
from vecmap.numerics import tensor as T
from vecmap.numerics.gradcheck import finite_diff_check
from vecmap.services.matching import detector_set_loss
from vecmap.services.synthdata import rasterize_scene
from vecmap.utils.errors import DatasetError, ShapeError, TokenDecodeError


@pytest.fixture
def model(tiny_cfg):
    """Randomly initialized tiny network."""
    return build_model(tiny_cfg.model, seed=3)


@pytest.fixture
def raster(toy_map, tiny_grid):
    """Clean (C, H, W) raster of the toy map."""
    return rasterize_scene(toy_map, tiny_grid)


@pytest.fixture
def toy_targets(toy_map, tiny_cfg):
    """Prepared targets of the toy map."""
    return prepare_targets(toy_map, tiny_cfg.model)


def sampled_params(model, per_group=4):
    """A few parameters of every component."""
    params = dict(model.named_parameters())
    chosen = []
    for names in model.parameter_groups().values():
        step = max(1, len(names) // per_group)
        chosen += [(n, params[n]) for n in names[::step][:per_group]]
    return chosen


@pytest.mark.unit
class TestEncoder:
    """Test suite for patch embedding and BEV features."""

    def test_patchify_pads_and_orders(self):
        """Test patches are row-major and zero-padded on the high side."""
        raster = np.arange(1 * 1 * 3 * 5, dtype=np.float64).reshape(1, 1, 3, 5)
        patches = patchify(raster, 2)
        assert feature_extent(3, 5, 2) == (2, 3)
        assert patches.shape == (1, 6, 4)
        np.testing.assert_array_equal(patches[0, 0], [0, 1, 5, 6])
        np.testing.assert_array_equal(patches[0, 5], [14, 0, 0, 0])

    def test_feature_shapes(self, model, raster):
        """Test the tiny encoder yields a 2x4 grid of hidden-size tokens."""
        features = model.encoder(np.stack([raster, raster]))
        assert (features.height, features.width) == (2, 4)
        assert features.tokens.shape == (2, 8, 8)
        assert features.as_grid().shape == (2, 2, 4, 8)

    def test_raster_shape_checked(self, model):
        """Test rasters of another size are rejected."""
        with pytest.raises(ShapeError):
            model.encoder(np.zeros((3, 8, 15)))


@pytest.mark.unit
class TestDetector:
    """Test suite for element detection."""

    def test_output_shapes_and_ranges(self, model, raster, tiny_grid):
        """Test logits, keypoints and normalized keypoints per query."""
        detections = model.detector(model.encoder(raster))
        assert detections.logits.shape == (1, 4, 4)
        assert detections.keypoints.shape == (1, 4, 3, 2)
        norm = detections.norm_keypoints.data
        assert np.all((norm > 0.0) & (norm < 1.0))
        assert tiny_grid.contains(detections.keypoints.data.reshape(-1, 2))
        np.testing.assert_allclose(detections.probs.sum(axis=-1), 1.0)
        assert np.all(detections.scores() <= 1.0)

    def test_sample_view(self, model, raster):
        """Test unbatched views share data with the batch."""
        detections = model.detector(model.encoder(np.stack([raster, raster])))
        one = detections.sample(1)
        assert not one.batched
        np.testing.assert_array_equal(one.logits.data, detections.logits.data[1])
        with pytest.raises(ShapeError):
            one.sample(1)

    def test_offsets_receive_gradient(self, model, raster, toy_targets):
        """Test the sampling-offset weights get a nonzero gradient."""
        features = model.encoder(raster)
        loss, _, _ = detector_set_loss(model.detector(features), [toy_targets.elements])
        loss.backward()
        grad = model.detector.layers[0].cross_attn.offsets.weight.grad
        assert grad is not None and np.abs(grad).sum() > 0.0

    def test_different_rasters_give_different_keypoints(self, model, raster, tiny_grid):
        """Test frozen weights map two different rasters to different keypoints."""
        empty = rasterize_scene(VectorMap(scene_id="empty"), tiny_grid)
        a = model.detector(model.encoder(raster)).keypoints.data
        b = model.detector(model.encoder(empty)).keypoints.data
        assert np.abs(a - b).max() > 1e-6

    def test_zero_keypoint_head_keeps_reference_points(self, tiny_cfg, raster):
        """Test refinement adds the head output to the reference logits."""
        cfg = tiny_cfg.model.model_copy(update={"detector_layers": 2})
        model = build_model(cfg, seed=1)
        detector = model.detector
        last = detector.kp_head.layers[-1]
        last.weight.data = np.zeros_like(last.weight.data)
        last.bias.data = np.zeros_like(last.bias.data)
        detections = detector(model.encoder(raster))
        initial = T.sigmoid(detector.ref_point(detector.queries(1))).data
        expected = initial.reshape(1, cfg.n_max, cfg.k, 2)
        np.testing.assert_allclose(detections.norm_keypoints.data, expected, atol=1e-12)

    @pytest.mark.parametrize("hidden", [32, 64])
    @pytest.mark.parametrize("n_max", [4, 12])
    @pytest.mark.parametrize("repr_kind", list(KeypointRepr))
    def test_shape_contract(self, tiny_cfg, toy_map, raster, repr_kind, n_max, hidden):
        """Test tensor shapes for every keypoint count, query count and width."""
        cfg = tiny_cfg.model.model_copy(
            update={"repr_kind": repr_kind, "n_max": n_max, "hidden": hidden}
        )
        model = build_model(cfg, seed=0)
        k = repr_kind.k
        features = model.encoder(np.stack([raster, raster]))
        assert features.tokens.shape == (2, 8, hidden)
        detections = model.detector(features)
        assert detections.logits.shape == (2, n_max, NO_OBJECT + 1)
        assert detections.keypoints.shape == (2, n_max, k, 2)

        cond = build_condition(detections.labels()[0], detections.keypoints.data[0], model.grid)
        assert cond.prompt.shape == (n_max, 1 + 2 * k)
        results = decode_polyline(model.generator, cond, model.encoder(raster), max_len=5)
        assert len(results) == n_max

        targets = prepare_targets(toy_map, cfg)
        assert targets.elements.keypoints.shape == (3, k, 2)
        loss, assignments = compute_loss(model, raster[None], [targets], stage=2)
        assert np.isfinite(loss.total.item())
        assert len(assignments[0].permutation) == n_max


@pytest.mark.unit
class TestTargets:
    """Test suite for target preparation."""

    def test_same_cell_vertices_merge(self, unit_grid):
        """Test consecutive vertices in one cell become a single token pair."""
        poly = Polyline.from_points([(0.2, 0.2), (0.7, 0.6), (3.5, 0.5)])
        seq, pts = target_tokens(poly, unit_grid)
        assert seq.tokens == (0, 0, 3, 0, unit_grid.eos_id)
        assert len(pts) == 2

    def test_closed_ring_drops_closing_vertex(self, crossing, tiny_grid):
        """Test closed polygons are tokenized without the repeated first vertex."""
        seq, pts = target_tokens(crossing.polyline, tiny_grid)
        assert seq.num_vertices == 4
        assert len(pts) == 4

    def test_budget_enforced(self):
        """Test sampled targets never exceed N_v_max vertices."""
        xs = np.linspace(-7.0, 7.0, 30)
        poly = Polyline.from_points(np.stack([xs, np.sin(xs)], axis=1))
        out = sample_target(poly, TargetSampling.FIXED_INTERVAL, n_v_max=6, interval_m=0.5)
        assert out.num_vertices <= 6
        assert out.vertices[0] == poly.vertices[0]

    def test_prepare_targets(self, toy_targets, toy_map):
        """Test one keypoint set and one sequence per element."""
        assert toy_targets.num == len(toy_map.elements)
        assert toy_targets.elements.keypoints.shape == (3, 3, 2)
        assert all(s.tokens[-1] == s.eos_id for s in toy_targets.sequences)

    def test_augmentation_off_keeps_tokens(self, toy_targets, tiny_grid, rng):
        """Test zero probability reproduces the clean target tokens."""
        for seq, verts in zip(toy_targets.sequences, toy_targets.vertices):
            assert augment_inputs(verts, tiny_grid, 0.0, 1.0, rng) == seq.tokens


@pytest.mark.unit
class TestGenerator:
    """Test suite for conditioning and decoding."""

    def test_condition_prompt(self, tiny_grid):
        """Test the prompt is the class token followed by keypoint cells."""
        kps = np.array([[[-7.5, -3.5], [0.5, 0.5], [7.5, 3.5]]])
        cond = build_condition([MapClass.DIVIDER.index], kps, tiny_grid)
        assert cond.prompt.tolist() == [[16 + 1 + 1, 0, 0, 8, 4, 15, 7]]
        with pytest.raises(ShapeError):
            build_condition([0, 1], kps, tiny_grid)

    def test_allowed_mask(self, model):
        """Test x slots allow W bins and EOS, y slots only H bins."""
        gen = model.generator
        x_mask, y_mask = _allowed_mask(gen, 0), _allowed_mask(gen, 1)
        assert x_mask.sum() == 16 + 1 and x_mask[gen.eos_id]
        assert y_mask.sum() == 8 and not y_mask[gen.eos_id]
        assert not y_mask[8:].any()

    def test_prefix_validation(self, model, raster, toy_targets):
        """Test a y token beyond H is rejected in the prefix."""
        features = model.encoder(raster)
        cond = build_condition(
            toy_targets.elements.labels[:1], toy_targets.elements.keypoints[:1], model.grid
        )
        logits = generator_step(model.generator, np.array([3, 2]), cond, features)
        assert logits.shape == (1, model.generator.vocab_out)
        with pytest.raises(TokenDecodeError):
            generator_step(model.generator, np.array([3, 9]), cond, features)

    def test_decode_is_well_formed(self, model, raster, toy_targets):
        """Test decoded sequences are even-length coordinates plus EOS in range."""
        features = model.encoder(raster)
        cond = build_condition(
            toy_targets.elements.labels, toy_targets.elements.keypoints, model.grid
        )
        for mode in (DecodeMode.GREEDY, DecodeMode.SAMPLE):
            results = decode_polyline(
                model.generator, cond, features, mode=mode, rng=np.random.default_rng(0)
            )
            assert len(results) == 3
            for r in results:
                coords = r.tokens.tokens[:-1]
                assert len(coords) % 2 == 0
                assert len(r.tokens.tokens) <= model.generator.max_len
                assert all(t < 16 for t in coords[0::2])
                assert all(t < 8 for t in coords[1::2])

    def test_parallel_decode_matches_sequential(self, model, raster, toy_targets):
        """Test decoding all elements at once gives the same tokens as one at a time."""
        features = model.encoder(raster)
        labels, kps = toy_targets.elements.labels, toy_targets.elements.keypoints
        cond = build_condition(labels, kps, model.grid)
        together = decode_polyline(model.generator, cond, features)
        for i, result in enumerate(together):
            cond = build_condition(labels[i : i + 1], kps[i : i + 1], model.grid)
            (alone,) = decode_polyline(model.generator, cond, features)
            assert alone.tokens.tokens == result.tokens.tokens
            assert alone.overflow == result.overflow

    def test_length_limit_flags_overflow(self, model, raster, toy_targets):
        """Test forcing EOS at a short limit marks every unfinished row."""
        features = model.encoder(raster)
        cond = build_condition(
            toy_targets.elements.labels, toy_targets.elements.keypoints, model.grid
        )
        results = decode_polyline(model.generator, cond, features, max_len=4)
        for r in results:
            assert len(r.tokens.tokens) <= 3
            if r.overflow:
                assert r.tokens.num_vertices == 1

    def test_teacher_forced_nll_target_count(self, model, raster, toy_targets):
        """Test the number of targets must match the prompts."""
        features = model.encoder(raster)
        cond = build_condition(
            toy_targets.elements.labels, toy_targets.elements.keypoints, model.grid
        )
        with pytest.raises(ShapeError):
            teacher_forced_nll(model.generator, cond, toy_targets.sequences[:1], features)


@pytest.mark.unit
class TestMapModel:
    """Test suite for the combined loss, inference and checkpoints."""

    def test_loss_is_sum_of_terms(self, model, raster, toy_targets):
        """Test L_total = L_det + L_gen for both stages."""
        for stage in (1, 2):
            loss, assignments = compute_loss(model, raster[None], [toy_targets], stage=stage)
            values = loss.values()
            assert values["loss_total"] == pytest.approx(values["loss_det"] + values["loss_gen"])
            assert len(assignments) == 1

    def test_unknown_stage(self, model, raster, toy_targets):
        """Test stages other than 1 and 2 are rejected."""
        with pytest.raises(ValueError):
            compute_loss(model, raster[None], [toy_targets], stage=3)

    def test_empty_scene_loss(self, model, raster, tiny_cfg):
        """Test a scene without elements has no generator term."""
        empty = prepare_targets(VectorMap(scene_id="empty"), tiny_cfg.model)
        loss, _ = compute_loss(model, raster[None], [empty])
        assert loss.gen.item() == 0.0
        assert loss.det.item() > 0.0

    def test_predict_map_thresholds(self, model, raster):
        """Test score thresholds control how many detections are decoded."""
        none, diag = predict_map(model, raster, score_threshold=1.1, scene_id="toy")
        assert none.predictions == () and diag.attempted == 0
        pred, diag = predict_map(
            model, raster, score_threshold=0.0, options=DecodeOptions(), scene_id="toy"
        )
        assert diag.attempted == 4
        assert diag.decoded + diag.degenerate == diag.attempted
        assert diag.decoded == len(pred.predictions)
        assert all(0.0 <= p.score <= 1.0 for p in pred.predictions)
        assert all(p.scene_id == "toy" for p in pred.predictions)

    def test_checkpoint_round_trip(self, model, raster, tiny_cfg, tmp_path):
        """Test a saved model predicts identically after reload."""
        path = save_model(tmp_path / "m.ckpt", model, tiny_cfg, meta={"stage": 1})
        loaded, cfg, header = load_model(path)
        assert cfg.model == tiny_cfg.model
        assert header["meta"]["stage"] == 1
        a, _ = predict_map(model, raster, score_threshold=0.0)
        b, _ = predict_map(loaded, raster, score_threshold=0.0)
        assert a == b

    def test_checkpoint_config_mismatch(self, model, tiny_cfg, tmp_path):
        """Test a checkpoint whose arrays do not fit its configuration is rejected."""
        smaller = tiny_cfg.model.model_copy(update={"hidden": 4})
        other = tiny_cfg.model_copy(update={"model": smaller})
        path = save_model(tmp_path / "m.ckpt", model, other)
        with pytest.raises(DatasetError):
            load_model(path)


@pytest.mark.unit
class TestGradientChecks:
    """Test suite for end-to-end finite-difference checks on the tiny model."""

    def test_detector_loss(self, model, raster, toy_targets):
        """Test the detector set loss gradients."""

        def loss():
            detections = model.detector(model.encoder(raster))
            return detector_set_loss(detections, [toy_targets.elements])[0]

        params = sampled_params(model)
        params = [(n, p) for n, p in params if not n.startswith("generator")]
        assert finite_diff_check(loss, params, max_coords=4) < 1e-4

    def test_generator_nll(self, model, raster, tiny_grid):
        """Test the teacher-forced NLL of a two-vertex sequence."""
        seq, _ = target_tokens(Polyline.from_points([(-2.0, 0.0), (3.0, 1.0)]), tiny_grid)
        assert len(seq.tokens) == 5
        cond = build_condition(
            [MapClass.DIVIDER.index], np.array([[[-2.0, 0.0], [0.5, 0.5], [3.0, 1.0]]]), tiny_grid
        )
        def loss():
            features = model.encoder(raster)
            return teacher_forced_nll(model.generator, cond, [seq], features)

        params = [(n, p) for n, p in sampled_params(model) if not n.startswith("detector")]
        assert finite_diff_check(loss, params, max_coords=4) < 1e-4

    def test_combined_loss(self, model, raster, toy_targets):
        """Test the total loss of both training stages."""
        for stage in (1, 2):

            def loss():
                return compute_loss(model, raster[None], [toy_targets], stage=stage)[0].total

            assert finite_diff_check(loss, sampled_params(model), max_coords=3) < 1e-4

    def test_parameters_have_gradients(self, model, raster, toy_targets):
        """Test every component receives gradient from the total loss."""
        model.zero_grad()
        loss, _ = compute_loss(model, raster[None], [toy_targets])
        loss.total.backward()
        for group, names in model.parameter_groups().items():
            grads = dict(model.named_parameters())
            assert any(grads[n].grad is not None for n in names), group
        model.zero_grad()
        assert all(p.grad is None for p in model.parameters())
        assert T.is_grad_enabled()
