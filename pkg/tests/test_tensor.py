"""Tensor ops: forward values, gradients vs finite differences, TNSR IO."""

import io
import threading

import numpy as np
import pytest

from flowpose.errors import FormatError, TapeError
from flowpose.gradcheck import check_gradients
from flowpose.tensor import (
    Tape,
    Tensor,
    add,
    avgpool2,
    concat_channels,
    conv2d,
    global_avgpool,
    l2_loss,
    load_tensor,
    maxpool2,
    reduce_sum,
    relu,
    save_tensor,
    scale,
    slice_channels,
    stack_batch,
)


def t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t([[[[1.0]]]])
        b = t(np.zeros((1, 1, 1, 1)))
        out = conv2d(x, k, b)
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_padded(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 3, 3)))
        b = t(np.zeros((1, 1, 1, 1)))
        out = conv2d(x, k, b, pad=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0
        assert out.data[0, 0, 0, 2] == 4.0

    def test_same_pad_preserves_shape(self):
        x = t(np.zeros((2, 3, 8, 10)))
        k = t(np.zeros((4, 3, 5, 5)))
        b = t(np.zeros((1, 4, 1, 1)))
        assert conv2d(x, k, b, pad=2).shape == (2, 4, 8, 10)

    def test_bias_added(self):
        x = t(np.zeros((1, 2, 4, 4)))
        k = t(np.zeros((3, 2, 1, 1)))
        b = t(np.arange(3.0).reshape(1, 3, 1, 1))
        out = conv2d(x, k, b)
        assert np.array_equal(out.data, np.broadcast_to(b.data, (1, 3, 4, 4)))

    def test_even_kernel_rejected(self):
        x = t(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError):
            conv2d(x, t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 1, 1))))

    def test_channel_mismatch_rejected(self):
        x = t(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError):
            conv2d(x, t(np.zeros((1, 3, 1, 1))), t(np.zeros((1, 1, 1, 1))))

    @pytest.mark.parametrize("pad", [0, 1])
    def test_gradients(self, rng, pad):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 4, 1, 1)), requires_grad=True)
        check_gradients(lambda: reduce_sum(conv2d(x, k, b, pad=pad)), [x, k, b], rtol=1e-6)

    def test_forward_deterministic(self, rng):
        x = t(rng.normal(size=(1, 2, 5, 5)))
        k = t(rng.normal(size=(3, 2, 3, 3)))
        b = t(rng.normal(size=(1, 3, 1, 1)))
        a = conv2d(x, k, b, pad=1).data
        assert np.array_equal(a, conv2d(x, k, b, pad=1).data)


class TestRelu:
    def test_values(self):
        out = relu(t([[[[-1.0, 0.0, 2.0]]]]))
        assert np.array_equal(out.data.ravel(), [0.0, 0.0, 2.0])

    def test_all_negative_zero_gradient(self):
        with Tape() as tape:
            x = t(np.full((1, 1, 2, 2), -3.0), grad=True)
            tape.backward(reduce_sum(relu(x)))
        assert np.array_equal(x.grad, np.zeros((1, 1, 2, 2)))

    def test_gradients(self, rng):
        # keep entries away from the kink so central differences are valid
        vals = rng.uniform(0.2, 1.0, size=(2, 2, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 2, 4, 4))
        x = Tensor(vals, requires_grad=True)
        check_gradients(lambda: reduce_sum(relu(x)), [x], rtol=1e-6)


class TestMaxpool2:
    def test_block_max(self):
        out = maxpool2(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 4.0

    def test_tie_break_gradient_first_element(self):
        with Tape() as tape:
            x = t(np.full((1, 1, 2, 2), 5.0), grad=True)
            tape.backward(reduce_sum(maxpool2(x)))
        assert np.array_equal(x.grad.ravel(), [1.0, 0.0, 0.0, 0.0])

    def test_gradients(self, rng):
        # distinct values so the argmax is stable under the probe step
        vals = rng.permutation(64).astype(float).reshape(1, 1, 8, 8)
        x = Tensor(vals, requires_grad=True)
        check_gradients(lambda: reduce_sum(maxpool2(x)), [x], rtol=1e-6)


class TestConcatSlice:
    def test_shapes(self):
        out = concat_channels(t(np.zeros((1, 2, 4, 4))), t(np.ones((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)

    def test_round_trip_bit_exact(self, rng):
        a = t(rng.normal(size=(1, 2, 4, 4)))
        b = t(rng.normal(size=(1, 3, 4, 4)))
        cat = concat_channels(a, b)
        assert np.array_equal(slice_channels(cat, 0, 2).data, a.data)
        assert np.array_equal(slice_channels(cat, 2, 5).data, b.data)

    def test_gradient_is_ones(self, rng):
        with Tape() as tape:
            a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
            tape.backward(reduce_sum(concat_channels(a, b)))
        assert np.array_equal(a.grad, np.ones_like(a.data))
        assert np.array_equal(b.grad, np.ones_like(b.data))


class TestL2Loss:
    def test_zero_at_match(self, rng):
        x = t(rng.normal(size=(1, 2, 3, 3)))
        assert l2_loss(x, x).item() == 0.0

    def test_unit_offset(self):
        p = t(np.zeros((1, 2, 3, 3)))
        q = t(np.ones((1, 2, 3, 3)))
        assert l2_loss(p, q).item() == 1.0

    def test_mask_selects_channels(self):
        p = t(np.zeros((1, 2, 3, 3)))
        q = Tensor(np.stack([np.ones((3, 3)), np.full((3, 3), 9.0)])[None])
        mask = np.zeros((1, 2, 1, 1))
        mask[0, 0] = 1.0
        assert l2_loss(p, q, mask).item() == 1.0

    def test_empty_mask_rejected(self):
        p = t(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            l2_loss(p, p, np.zeros((1, 1, 1, 1)))

    def test_gradients(self, rng):
        pred = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
        target = t(rng.normal(size=(1, 3, 4, 4)))
        mask = (rng.random((1, 3, 1, 1)) < 0.7).astype(float)
        mask[0, 0] = 1.0
        check_gradients(lambda: l2_loss(pred, target, mask), [pred], rtol=1e-8, atol=1e-10)


class TestPoolingOps:
    def test_avgpool2(self):
        out = avgpool2(t([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.item() == 2.5

    def test_global_avgpool(self):
        out = global_avgpool(t(np.arange(16.0).reshape(1, 1, 4, 4)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 7.5

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        check_gradients(lambda: reduce_sum(avgpool2(x)), [x], rtol=1e-6)
        x.grad = None
        check_gradients(lambda: reduce_sum(global_avgpool(x)), [x], rtol=1e-6)


class TestArithmetic:
    def test_add_scale(self, rng):
        a = t(rng.normal(size=(1, 1, 2, 2)))
        b = t(rng.normal(size=(1, 1, 2, 2)))
        assert np.array_equal(add(a, b).data, a.data + b.data)
        assert np.array_equal(scale(a, 2.5).data, a.data * 2.5)

    def test_gradients(self, rng):
        a = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        check_gradients(lambda: reduce_sum(add(scale(a, 3.0), b)), [a, b], rtol=1e-8, atol=1e-10)

    def test_stack_batch(self, rng):
        parts = [t(rng.normal(size=(1, 2, 3, 3))) for _ in range(4)]
        out = stack_batch(parts)
        assert out.shape == (4, 2, 3, 3)
        assert np.array_equal(out.data[2], parts[2].data[0])


class TestTape:
    def test_backward_twice_rejected(self):
        with Tape() as tape:
            x = t(np.ones((1, 1, 1, 1)), grad=True)
            y = scale(x, 2.0)
            tape.backward(y)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_no_recording_outside_tape(self):
        x = t(np.ones((1, 1, 2, 2)), grad=True)
        y = relu(x)  # no active tape: plain evaluation
        assert y.shape == x.shape

    def test_gradients_accumulate_across_reuse(self):
        with Tape() as tape:
            x = t(np.ones((1, 1, 1, 1)), grad=True)
            tape.backward(add(scale(x, 2.0), scale(x, 3.0)))
        assert x.grad.item() == 5.0

    def test_thread_local_tapes(self):
        # concurrent taped graphs must not interleave records
        errors = []

        def work(factor):
            try:
                for _ in range(50):
                    with Tape() as tape:
                        x = t(np.full((1, 1, 2, 2), 1.0), grad=True)
                        tape.backward(reduce_sum(scale(x, factor)))
                    assert np.allclose(x.grad, factor)
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        threads = [threading.Thread(target=work, args=(f,)) for f in (2.0, 3.0, 5.0)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert not errors


class TestTensorIO:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        x = t(rng.normal(size=(2, 3, 5, 4)))
        path = tmp_path / "x.tns"
        save_tensor(x, path)
        back = load_tensor(path)
        assert back.shape == x.shape
        assert np.array_equal(back.data, x.data)
        save_tensor(back, tmp_path / "y.tns")
        assert (tmp_path / "x.tns").read_bytes() == (tmp_path / "y.tns").read_bytes()

    def test_bad_magic_rejected(self, rng, tmp_path):
        path = tmp_path / "x.tns"
        save_tensor(t(rng.normal(size=(1, 1, 2, 2))), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_tensor(path)

    def test_trailing_bytes_rejected(self, rng, tmp_path):
        path = tmp_path / "x.tns"
        save_tensor(t(rng.normal(size=(1, 1, 2, 2))), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_tensor(path)

    def test_truncated_rejected(self, rng, tmp_path):
        path = tmp_path / "x.tns"
        save_tensor(t(rng.normal(size=(1, 1, 4, 4))), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 8])
        with pytest.raises(FormatError):
            load_tensor(path)


class TestTensorValidation:
    def test_non_4d_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros(3))

    def test_copy_is_independent(self):
        x = t(np.ones((1, 1, 2, 2)))
        y = x.copy()
        y.data[0, 0, 0, 0] = 9.0
        assert x.data[0, 0, 0, 0] == 1.0
