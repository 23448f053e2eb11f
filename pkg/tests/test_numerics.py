"""Tests for the autodiff tensor, gradient checking, AdamW and checkpoints."""

import threading

import numpy as np
import pytest

from vecmap.numerics import tensor as T
from vecmap.numerics.checkpoint import (
    MAGIC,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from vecmap.numerics.gradcheck import finite_diff_check, relative_error
from vecmap.numerics.optim import AdamW, LRSchedule, OptimState, lr_at
from vecmap.utils.errors import DatasetError, ShapeError, TrainingError


def named(**arrays):
    return [(name, T.parameter(a, name=name)) for name, a in arrays.items()]


@pytest.mark.unit
class TestTensorOps:
    """Test suite for forward values and graph bookkeeping."""

    def test_broadcast_gradient_is_summed(self):
        """Test gradients of a broadcast operand reduce back to its shape."""
        a = T.parameter(np.ones((3, 4)))
        b = T.parameter(np.arange(4.0))
        T.tsum(T.mul(a, b)).backward()
        np.testing.assert_allclose(b.grad, [3.0, 3.0, 3.0, 3.0])
        np.testing.assert_allclose(a.grad, np.tile(np.arange(4.0), (3, 1)))

    def test_incompatible_shapes(self):
        """Test non-broadcastable operands raise ShapeError."""
        with pytest.raises(ShapeError):
            T.add(np.zeros(3), np.zeros(4))

    def test_reused_node_accumulates(self):
        """Test a tensor used twice receives both gradient contributions."""
        x = T.parameter(np.array(2.0))
        T.add(T.mul(x, x), x).backward()
        assert x.grad == pytest.approx(5.0)

    def test_no_grad_records_nothing(self):
        """Test ops inside no_grad do not require gradients."""
        x = T.parameter(np.ones(2))
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad

    def test_mode_switches_are_per_thread(self):
        """Test interleaved no_grad and eval_mode blocks in two threads leave no residue."""
        a_entered, b_entered, a_exited = threading.Event(), threading.Event(), threading.Event()
        seen = {}

        def first():
            with T.no_grad(), T.eval_mode():
                a_entered.set()
                b_entered.wait(5)
            a_exited.set()
            seen["a_after"] = (T.is_grad_enabled(), T.is_training())

        def second():
            a_entered.wait(5)
            with T.no_grad(), T.eval_mode():
                b_entered.set()
                a_exited.wait(5)
                seen["b_inside"] = (T.is_grad_enabled(), T.is_training())
            seen["b_after"] = (T.is_grad_enabled(), T.is_training())

        threads = [threading.Thread(target=first), threading.Thread(target=second)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(10)

        expected = {"a_after": (True, True), "b_inside": (False, False), "b_after": (True, True)}
        assert seen == expected
        assert T.is_grad_enabled()
        x = T.parameter(np.ones(2))
        assert T.mul(x, 2.0).requires_grad

    def test_softmax_rows_sum_to_one(self, rng):
        """Test softmax normalizes along the last axis."""
        p = T.softmax(rng.normal(size=(5, 7)) * 30.0)
        np.testing.assert_allclose(p.data.sum(axis=-1), 1.0)
        assert np.all(np.isfinite(T.log_softmax(np.array([[1000.0, 0.0]])).data))

    def test_cross_entropy_uniform(self):
        """Test uniform logits cost ln C per item."""
        loss = T.cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(np.log(4.0))

    def test_cross_entropy_rejects_bad_targets(self):
        """Test out-of-range class ids raise."""
        with pytest.raises(ShapeError):
            T.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_dropout_identity_in_eval_mode(self, rng):
        """Test dropout is a no-op when training is off."""
        x = T.as_tensor(np.ones((4, 4)))
        with T.eval_mode():
            assert T.dropout(x, 0.5, rng) is x

    def test_dropout_scales_kept_units(self, rng):
        """Test inverted dropout zeroes or rescales every unit."""
        T.set_training(True)
        try:
            out = T.dropout(np.ones(1000), 0.5, rng).data
        finally:
            T.set_training(False)
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert 300 < np.count_nonzero(out) < 700

    def test_grid_sample_pixel_centers(self):
        """Test sampling at a pixel center returns that pixel."""
        value = np.arange(12.0).reshape(1, 3, 4, 1)
        coords = np.array([[[(1 + 0.5) / 4, (2 + 0.5) / 3]]])
        out = T.grid_sample(T.as_tensor(value), T.as_tensor(coords))
        assert out.data[0, 0, 0] == pytest.approx(value[0, 2, 1, 0])

    def test_item_requires_scalar(self):
        """Test item() rejects multi-element tensors."""
        with pytest.raises(ShapeError):
            T.as_tensor(np.zeros(2)).item()


@pytest.mark.unit
class TestGradients:
    """Test suite for analytic gradients against central differences."""

    def test_relative_error(self):
        """Test the relative error formula and its floor."""
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
        assert relative_error(0.0, 0.0) == 0.0

    def test_mlp_block(self, rng):
        """Test matmul, GELU, tanh and layer norm gradients."""
        params = named(
            x=rng.normal(size=(3, 5)),
            w=rng.normal(size=(5, 4)),
            gamma=rng.normal(size=4),
            beta=rng.normal(size=4),
        )
        p = dict(params)

        def loss():
            h = T.gelu(T.matmul(p["x"], p["w"]))
            h = T.layer_norm(h, p["gamma"], p["beta"])
            return T.tsum(T.mul(T.tanh(h), np.arange(12.0).reshape(3, 4)))

        assert finite_diff_check(loss, params, max_coords=None) < 1e-6

    def test_attention_style_softmax(self, rng):
        """Test softmax, transpose and division gradients."""
        params = named(q=rng.normal(size=(2, 3, 4)), k=rng.normal(size=(2, 5, 4)))
        p = dict(params)
        weights = rng.normal(size=(2, 3, 5))

        def loss():
            scores = T.div(T.matmul(p["q"], T.swapaxes(p["k"], -1, -2)), 2.0)
            return T.tsum(T.mul(T.softmax(scores, axis=-1), weights))

        assert finite_diff_check(loss, params, max_coords=None) < 1e-6

    def test_cross_entropy_and_indexing(self, rng):
        """Test weighted cross-entropy, embedding and gather gradients."""
        params = named(table=rng.normal(size=(6, 4)))
        table = params[0][1]
        ids = np.array([[0, 5, 2], [1, 1, 4]])
        targets = np.array([[3, 0, 1], [2, 2, 0]])
        weights = rng.uniform(0.1, 1.0, size=(2, 3))

        def loss():
            logits = T.embedding(table, ids)
            return T.cross_entropy(logits, targets, weights, "sum")

        assert finite_diff_check(loss, params, max_coords=None) < 1e-6

    def test_grid_sample(self, rng):
        """Test bilinear sampling gradients for values and interior coordinates."""
        params = named(
            value=rng.normal(size=(1, 4, 5, 3)),
            coords=rng.uniform(0.25, 0.75, size=(1, 6, 2)),
        )
        p = dict(params)
        weights = rng.normal(size=(1, 6, 3))

        def loss():
            return T.tsum(T.mul(T.grid_sample(p["value"], p["coords"]), weights))

        assert finite_diff_check(loss, params, max_coords=None) < 1e-4

    def test_reductions(self, rng):
        """Test mean, max, min, sqrt and clip gradients."""
        params = named(x=rng.uniform(0.5, 2.0, size=(4, 3)))
        x = params[0][1]

        def loss():
            y = T.add(T.amax(x, axis=-1), T.amin(x, axis=0).sum())
            return T.add(T.mean(T.sqrt(y)), T.tsum(T.clip(x, 0.0, 1.5)))

        assert finite_diff_check(loss, params, max_coords=None) < 1e-6

    def test_zeroed_backward_is_caught(self, rng):
        """Test a backward rule that returns zeros fails the check."""
        params = named(x=rng.normal(size=(3, 4)))
        x = params[0][1]

        def broken_tanh(a):
            out = np.tanh(a.data)
            return T._make(out, (a,), lambda g: (np.zeros_like(g),))

        def loss():
            return T.tsum(broken_tanh(x))

        assert finite_diff_check(loss, params, max_coords=None) > 0.5
        assert finite_diff_check(loss, params, max_coords=3) > 0.5

    def test_flat_coordinates_are_skipped(self):
        """Test coordinates with no gradient either way do not count."""
        params = named(x=np.array([0.5, 3.0]))
        x = params[0][1]

        def loss():
            return T.tsum(T.clip(x, 0.0, 1.0))

        assert finite_diff_check(loss, params, max_coords=None) < 1e-6


@pytest.mark.unit
class TestOptimizer:
    """Test suite for the LR schedule and AdamW."""

    def test_schedule(self):
        """Test linear warm-up and the 10x step decay."""
        schedule = LRSchedule(base_lr=1e-3, warmup_steps=10, decay_step=100)
        assert lr_at(0, schedule) == 0.0
        assert lr_at(5, schedule) == pytest.approx(5e-4)
        assert lr_at(10, schedule) == pytest.approx(1e-3)
        assert lr_at(99, schedule) == pytest.approx(1e-3)
        assert lr_at(100, schedule) == pytest.approx(1e-4)

    def test_converges_on_quadratic(self):
        """Test AdamW drives a quadratic to its minimum."""
        x = T.parameter(np.array([5.0, -4.0]))
        opt = AdamW(
            [("x", x)],
            LRSchedule(base_lr=0.1, warmup_steps=0, decay_step=300),
            weight_decay=0.0,
        )
        for _ in range(500):
            opt.zero_grad()
            T.tsum(T.power(T.sub(x, 3.0), 2.0)).backward()
            opt.step()
        np.testing.assert_allclose(x.data, [3.0, 3.0], atol=1e-2)

    def test_clipping_caps_global_norm(self):
        """Test gradients are rescaled to clip_norm and the raw norm is returned."""
        x = T.parameter(np.zeros(2))
        opt = AdamW([("x", x)], LRSchedule(1e-3, 0, 10), clip_norm=1.0)
        x.grad = np.array([3.0, 4.0])
        assert opt.clip_gradients() == pytest.approx(5.0)
        assert np.linalg.norm(x.grad) == pytest.approx(1.0)

    def test_non_finite_gradient(self):
        """Test NaN gradients raise TrainingError."""
        x = T.parameter(np.zeros(2))
        opt = AdamW([("x", x)], LRSchedule(1e-3, 0, 10))
        x.grad = np.array([np.nan, 0.0])
        with pytest.raises(TrainingError):
            opt.step()

    def test_state_round_trip(self):
        """Test moment buffers survive conversion to flat arrays."""
        state = OptimState(m={"w": np.ones(3)}, v={"w": np.full(3, 2.0)}, step=7)
        back = OptimState.from_arrays(state.to_arrays())
        assert back.step == 7
        np.testing.assert_array_equal(back.v["w"], state.v["w"])


@pytest.mark.unit
class TestCheckpoint:
    """Test suite for the checkpoint file format."""

    def test_round_trip(self, tmp_path):
        """Test arrays, config and metadata are restored exactly."""
        arrays = {"b.bias": np.arange(3.0), "a.weight": np.eye(2) * 0.1}
        path = save_checkpoint(tmp_path / "m.ckpt", arrays, {"seed": 1}, {"stage": 1})
        loaded, header = load_checkpoint(path)
        assert set(loaded) == set(arrays)
        for name, a in arrays.items():
            np.testing.assert_array_equal(loaded[name], a)
        assert header["config"] == {"seed": 1}
        assert header["meta"] == {"stage": 1}

    def test_hash_is_deterministic(self, tmp_path):
        """Test identical content produces identical bytes."""
        arrays = {"w": np.linspace(0, 1, 7)}
        h1 = checkpoint_hash(save_checkpoint(tmp_path / "1.ckpt", arrays, meta={"k": 2}))
        h2 = checkpoint_hash(save_checkpoint(tmp_path / "2.ckpt", arrays, meta={"k": 2}))
        assert h1 == h2

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint raises DatasetError."""
        with pytest.raises(DatasetError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_bad_magic(self, tmp_path):
        """Test foreign files are rejected."""
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(DatasetError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        """Test a cut-off payload is detected."""
        path = save_checkpoint(tmp_path / "t.ckpt", {"w": np.ones(10)})
        raw = path.read_bytes()
        assert raw.startswith(MAGIC)
        path.write_bytes(raw[:-16])
        with pytest.raises(DatasetError):
            load_checkpoint(path)
