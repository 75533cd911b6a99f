import math

import numpy as np
import pytest

from thermoseg import ops
from thermoseg.autodiff import (
    Parameter,
    Tensor,
    backward,
    elementwise,
    mul,
    relu,
    sigmoid,
    sum_all,
)
from thermoseg.nn import sgd_step

from oracles import conv2d_loops, zero_interleave_kernel


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        out = ops.conv2d(x, w)
        assert np.array_equal(out.data, x.data)

    def test_dilated_ones_sums_nine_taps(self):
        x = Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = ops.conv2d(x, w, dilation=2)
        assert out.shape == (1, 1, 1, 1)
        expected = conv2d_loops(x.data, w.data, dilation=2)
        assert out.data == pytest.approx(expected)
        assert out.item() == 9.0

    def test_atrous_preserves_resolution(self):
        # k=3, pad=2, dilation=2, stride=1 keeps H
        assert ops.conv_output_size(480, 3, 1, 2, 2) == 480
        assert ops.conv_output_size(33, 3, 1, 2, 2) == 33

    def test_matches_loop_oracle_exactly_on_integer_inputs(self, rng):
        # integer-valued floats make the result order-independent, so the
        # im2col path must agree bit-for-bit with the nested-loop oracle
        for trial in range(30):
            n, c, co = rng.integers(1, 3), int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h = int(rng.integers(1, 8))
            w = int(rng.integers(1, 8))
            k = int(rng.integers(1, min(h, w) + 1))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 3))
            max_dil = max((h + 2 * padding - 1) // max(k - 1, 1), 1) if k > 1 else 1
            dilation = int(rng.integers(1, max_dil + 1))
            if ops.conv_output_size(h, k, stride, padding, dilation) <= 0:
                continue
            if ops.conv_output_size(w, k, stride, padding, dilation) <= 0:
                continue
            x = rng.integers(-4, 5, (n, c, h, w)).astype(np.float32)
            wt = rng.integers(-4, 5, (co, c, k, k)).astype(np.float32)
            b = rng.integers(-4, 5, co).astype(np.float32)
            got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding, dilation)
            want = conv2d_loops(x, wt, b, stride, padding, dilation)
            assert np.array_equal(got.data, want)

    def test_dilation_equals_zero_interleaved_kernel(self, rng):
        for d in (2, 3):
            x = rng.integers(-3, 4, (1, 2, 7, 7)).astype(np.float32)
            w = rng.integers(-3, 4, (2, 2, 3, 3)).astype(np.float32)
            dilated = ops.conv2d(Tensor(x), Tensor(w), dilation=d)
            interleaved = ops.conv2d(Tensor(x), Tensor(zero_interleave_kernel(w, d)), dilation=1)
            assert np.array_equal(dilated.data, interleaved.data)

    def test_rejects_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(x, w)

    def test_rejects_empty_output(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="not positive"):
            ops.conv2d(x, w)

    def test_rejects_bad_hyperparams(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="invalid"):
            ops.conv2d(x, w, stride=0)
        with pytest.raises(ValueError, match="invalid"):
            ops.conv2d(x, w, dilation=0)


class TestActivation:
    def test_sigmoid_symmetry(self):
        assert sigmoid(Tensor(np.zeros(1))).data == pytest.approx(0.5)

    def test_relu_definition(self):
        out = relu(Tensor(np.array([-2.5, 3.0])))
        assert out.data == pytest.approx([0.0, 3.0])

    def test_sigmoid_at_gate_identity_point(self, f64):
        # bisection on t * sigmoid(t) = 1, independent of the library
        lo, hi = 1.0, 2.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if mid / (1.0 + math.exp(-mid)) > 1.0:
                hi = mid
            else:
                lo = mid
        root = 0.5 * (lo + hi)
        assert root == pytest.approx(1.27846, abs=1e-5)
        s = sigmoid(Tensor(np.array([root])))
        assert s.data[0] == pytest.approx(0.78219, abs=1e-5)
        assert root * s.data[0] == pytest.approx(1.0, abs=1e-9)

    def test_sigmoid_stays_finite_and_bounded(self):
        out = sigmoid(Tensor(np.array([-500.0, -30.0, 0.0, 30.0, 500.0])))
        assert np.isfinite(out.data).all()
        assert (out.data >= 0.0).all() and (out.data <= 1.0).all()

    def test_activation_dispatch(self):
        from thermoseg.autodiff import activation
        x = Tensor(np.array([1.0]))
        assert activation(x, "relu").data == pytest.approx([1.0])
        with pytest.raises(ValueError):
            activation(x, "tanh")


class TestElementwise:
    def test_identities(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32))
        assert np.array_equal(elementwise(x, Tensor(np.ones_like(x.data)), "mul").data, x.data)
        assert np.array_equal(elementwise(x, Tensor(np.zeros_like(x.data)), "add").data, x.data)

    def test_per_channel_broadcast(self):
        x = Tensor(np.array([2.0, 3.0]).reshape(1, 2, 1, 1))
        b = Tensor(np.array([10.0, 100.0]))
        out = elementwise(x, b, "mul")
        assert out.data.ravel() == pytest.approx([20.0, 300.0])

    def test_rejects_non_broadcastable(self):
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="broadcastable"):
            elementwise(a, b, "mul")

    def test_rejects_unknown_op(self):
        with pytest.raises(ValueError, match="unknown"):
            elementwise(Tensor(np.zeros(1)), Tensor(np.zeros(1)), "sub")


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.standard_normal((4, 3, 5, 5)).astype(np.float32) * 3 + 1)
        scale = Parameter(np.ones(3, dtype=np.float32))
        shift = Parameter(np.zeros(3, dtype=np.float32))
        out = ops.batch_norm(x, scale, shift, ops.RunningStats(3), train=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert mean == pytest.approx(np.zeros(3), abs=1e-6)
        assert var == pytest.approx(np.ones(3), abs=1e-4)

    def test_hand_computed_population_variance(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        out = ops.batch_norm(x, Parameter(np.ones(1)), Parameter(np.zeros(1)),
                             ops.RunningStats(1), train=True)
        assert out.data.ravel() == pytest.approx([-1.3416, -0.4472, 0.4472, 1.3416], abs=1e-3)

    def test_standardized_input_passes_through(self, rng):
        raw = rng.standard_normal((2, 1, 8, 8))
        raw = (raw - raw.mean()) / raw.std()
        x = Tensor(raw.reshape(2, 1, 8, 8).astype(np.float32))
        out = ops.batch_norm(x, Parameter(np.ones(1)), Parameter(np.zeros(1)),
                             ops.RunningStats(1), train=True)
        assert out.data == pytest.approx(x.data, abs=1e-4)

    def test_eval_uses_running_stats_and_rejects_uninitialized(self, rng):
        stats = ops.RunningStats(2)
        scale, shift = Parameter(np.ones(2)), Parameter(np.zeros(2))
        x = Tensor(rng.standard_normal((2, 2, 4, 4)).astype(np.float32))
        with pytest.raises(ValueError, match="eval"):
            ops.batch_norm(x, scale, shift, stats, train=False)
        ops.batch_norm(x, scale, shift, stats, train=True)
        assert stats.initialized
        y1 = ops.batch_norm(x, scale, shift, stats, train=False)
        y2 = ops.batch_norm(Tensor(x.data[:1]), scale, shift, stats, train=False)
        # eval output per pixel is independent of batch composition
        assert np.array_equal(y1.data[:1], y2.data)

    def test_running_stats_momentum(self):
        stats = ops.RunningStats(1)
        x = Tensor(np.full((1, 1, 2, 2), 10.0))
        ops.batch_norm(x, Parameter(np.ones(1)), Parameter(np.zeros(1)), stats, train=True)
        # blended from the (0, 1) defaults with momentum 0.1
        assert stats.mean[0] == pytest.approx(1.0)
        assert stats.var[0] == pytest.approx(0.9)


class TestBilinearResize:
    def test_identity_size(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 5)).astype(np.float32))
        assert np.array_equal(ops.bilinear_resize(x, 3, 5).data, x.data)

    def test_hand_interpolated_upsample(self):
        x = Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2))
        out = ops.bilinear_resize(x, 1, 4)
        assert out.data.ravel() == pytest.approx([0.0, 0.5, 1.5, 2.0])

    def test_constant_preserved(self, rng):
        x = Tensor(np.full((1, 1, 5, 7), 3.25, dtype=np.float32))
        for th, tw in [(1, 1), (3, 3), (10, 14), (13, 4)]:
            out = ops.bilinear_resize(x, th, tw)
            assert out.data == pytest.approx(np.full((1, 1, th, tw), 3.25))

    def test_rejects_empty_target(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError, match="positive"):
            ops.bilinear_resize(x, 0, 4)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((1, 20, 2, 2)))
        labels = np.zeros((1, 2, 2), dtype=np.int64)
        loss = ops.cross_entropy(logits, labels)
        assert loss.item() == pytest.approx(math.log(20), abs=1e-6)

    def test_confident_logit_drives_loss_to_zero(self):
        logits = np.zeros((1, 3, 1, 1), dtype=np.float64)
        logits[0, 1] = 60.0
        loss = ops.cross_entropy(Tensor(logits), np.full((1, 1, 1), 1, dtype=np.int64))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_two_pixel_hand_case(self, f64):
        logits = Tensor(np.array([[2.0, 0.0], [0.0, 1.0]]).T.reshape(1, 2, 1, 2))
        labels = np.zeros((1, 1, 2), dtype=np.int64)
        loss = ops.cross_entropy(logits, labels)
        expected = (math.log(1 + math.exp(-2)) + math.log(1 + math.exp(1))) / 2
        assert expected == pytest.approx(0.7201, abs=1e-4)
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_ignore_index(self):
        logits = Tensor(np.zeros((1, 2, 1, 2)))
        labels = np.array([[[0, 255]]], dtype=np.int64)
        loss = ops.cross_entropy(logits, labels, ignore_index=255)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_all_ignored_rejected(self):
        logits = Tensor(np.zeros((1, 2, 1, 1)))
        with pytest.raises(ValueError, match="ignored"):
            ops.cross_entropy(logits, np.full((1, 1, 1), 255, dtype=np.int64))

    def test_out_of_range_label_rejected(self):
        logits = Tensor(np.zeros((1, 2, 1, 1)))
        with pytest.raises(ValueError, match="outside"):
            ops.cross_entropy(logits, np.full((1, 1, 1), 7, dtype=np.int64))

    def test_softmax_sums_to_one(self, rng):
        logits = rng.standard_normal((2, 6, 5, 5)) * 10
        probs = ops.softmax(logits, axis=1)
        assert probs.sum(axis=1) == pytest.approx(np.ones((2, 5, 5)), abs=1e-9)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        backward(sum_all(x))
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_square(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        backward(sum_all(mul(x, x)))
        assert x.grad == pytest.approx([6.0])

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(mul(x, x))

    def test_unreachable_grads_untouched(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        backward(sum_all(mul(x, x)))
        assert y.grad is None
        assert x.grad is not None

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = mul(x, x)  # x used twice in one op
        z = sum_all(y + y)  # y used twice again
        backward(z)
        assert x.grad == pytest.approx([8.0])  # d(2x^2)/dx = 4x


class TestSgdStep:
    def test_zero_lr_keeps_params(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.5, 0.5])
        sgd_step([p], lr=0.0, momentum=0.9, weight_decay=0.0)
        assert p.data == pytest.approx([1.0, -2.0])
        assert p.grad is None

    def test_vanilla_step(self):
        p = Parameter(np.array([1.0]))
        p.grad = np.array([0.5])
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p.data == pytest.approx([0.95])

    def test_two_momentum_steps(self):
        p = Parameter(np.array([0.0]))
        for _ in range(2):
            p.grad = np.array([1.0])
            sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        assert p.data == pytest.approx([-0.29])

    def test_weight_decay_enters_buffer(self):
        p = Parameter(np.array([2.0]))
        p.grad = np.array([0.0])
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.5)
        assert p.data == pytest.approx([2.0 - 0.1 * (0.5 * 2.0)])

    def test_missing_grad_rejected(self):
        p = Parameter(np.array([1.0]))
        with pytest.raises(ValueError, match="no gradient"):
            sgd_step([p], lr=0.1)


class TestNumericHygiene:
    def test_forward_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)

    def test_finite_outputs_on_finite_inputs(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32) * 50)
        w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
        out = ops.conv2d(x, w, padding=1)
        out = ops.batch_norm(out, Parameter(np.ones(4)), Parameter(np.zeros(4)),
                             ops.RunningStats(4), train=True)
        out = sigmoid(out)
        out = ops.bilinear_resize(out, 13, 5)
        assert np.isfinite(out.data).all()
