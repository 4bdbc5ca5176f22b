"""Forward-pass contracts of the tensor engine, checked against naive oracles."""

import numpy as np
import pytest

from pyradet import ops
from pyradet.exceptions import ShapeError
from pyradet.tensor import Tensor


def conv2d_oracle(x, w, b, stride, pad):
    """Six nested loops, no vectorization: the reference cross-correlation."""
    c, h, width = x.shape
    f, _, k, _ = w.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1
    xp = np.zeros((c, h + 2 * pad, width + 2 * pad), dtype=np.float64)
    xp[:, pad : pad + h, pad : pad + width] = x
    out = np.zeros((f, out_h, out_w), dtype=np.float64)
    for fi in range(f):
        for oy in range(out_h):
            for ox in range(out_w):
                acc = 0.0
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            acc += (
                                w[fi, ci, ky, kx]
                                * xp[ci, oy * stride + ky, ox * stride + kx]
                            )
                out[fi, oy, ox] = acc + b[fi]
    return out


class TestConv2d:
    def test_identity_1x1(self, rng):
        c = 3
        x = Tensor(rng.standard_normal((c, 5, 5)).astype(np.float32))
        w = Tensor(np.eye(c, dtype=np.float32).reshape(c, c, 1, 1))
        b = Tensor(np.zeros(c, dtype=np.float32))
        y = ops.conv2d(x, w, b)
        np.testing.assert_array_equal(y.data, x.data)

    def test_ones_3x3_counts_taps(self):
        x = Tensor(np.ones((1, 4, 4), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        y = ops.conv2d(x, w, b, stride=1, pad=1)
        assert y.shape == (1, 4, 4)
        assert y.data[0, 1, 1] == 9.0
        assert y.data[0, 2, 2] == 9.0
        for cy, cx in [(0, 0), (0, 3), (3, 0), (3, 3)]:
            assert y.data[0, cy, cx] == 4.0

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.standard_normal((2, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        expected = conv2d_oracle(x, w, b, stride, pad)
        np.testing.assert_allclose(y.data, expected, rtol=1e-5, atol=1e-6)

    def test_stride2_halves_even_extents(self, rng):
        x = Tensor(rng.standard_normal((3, 16, 16)).astype(np.float32))
        w = Tensor(rng.standard_normal((5, 3, 3, 3)).astype(np.float32))
        b = Tensor(np.zeros(5, dtype=np.float32))
        y = ops.conv2d(x, w, b, stride=2, pad=1)
        assert y.shape == (5, 8, 8)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(np.zeros((2, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ShapeError, match="2 channels"):
            ops.conv2d(x, w, b, pad=1)

    def test_unsupported_kernel_raises(self):
        x = Tensor(np.zeros((1, 8, 8), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        with pytest.raises(ShapeError, match="kernel"):
            ops.conv2d(x, w, b, pad=2)


class TestMaxPool:
    def test_constant_input(self):
        x = Tensor(np.full((2, 4, 4), 3.5, dtype=np.float32))
        y = ops.maxpool2x2(x)
        np.testing.assert_array_equal(y.data, np.full((2, 2, 2), 3.5, dtype=np.float32))

    def test_single_window(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32))
        y = ops.maxpool2x2(x)
        np.testing.assert_array_equal(y.data, [[[4.0]]])

    def test_matches_window_scan_oracle(self, rng):
        x = rng.standard_normal((3, 6, 6)).astype(np.float32)
        y = ops.maxpool2x2(Tensor(x))
        expected = np.zeros((3, 3, 3), dtype=np.float32)
        for c in range(3):
            for oy in range(3):
                for ox in range(3):
                    expected[c, oy, ox] = x[c, 2 * oy : 2 * oy + 2, 2 * ox : 2 * ox + 2].max()
        np.testing.assert_array_equal(y.data, expected)

    def test_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            ops.maxpool2x2(Tensor(np.zeros((1, 5, 4), dtype=np.float32)))


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        x = Tensor(np.full((2, 3, 5), 0.7, dtype=np.float32))
        y = ops.upsample_bilinear_2x(x)
        assert y.shape == (2, 6, 10)
        np.testing.assert_allclose(y.data, 0.7, rtol=0, atol=1e-7)

    def test_single_pixel_clamps(self):
        x = Tensor(np.array([[[2.5]]], dtype=np.float32))
        y = ops.upsample_bilinear_2x(x)
        np.testing.assert_array_equal(y.data, np.full((1, 2, 2), 2.5, dtype=np.float32))

    def test_two_pixel_row(self):
        # Hand-evaluated half-pixel sampling: destinations 0..3 read source
        # coordinates -0.25, 0.25, 0.75, 1.25 (clamped to [0, 1]).
        x = Tensor(np.array([[[0.0, 1.0]]], dtype=np.float32))
        y = ops.upsample_bilinear_2x(x)
        np.testing.assert_allclose(y.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-7)
        np.testing.assert_allclose(y.data[0, 1], [0.0, 0.25, 0.75, 1.0], atol=1e-7)


class TestConcatAndSlice:
    def test_single_input_identity(self, rng):
        x = rng.standard_normal((3, 4, 4)).astype(np.float32)
        y = ops.concat_channels([Tensor(x)])
        np.testing.assert_array_equal(y.data, x)

    def test_block_order_preserved(self, rng):
        a = rng.standard_normal((2, 4, 4)).astype(np.float32)
        b = rng.standard_normal((3, 4, 4)).astype(np.float32)
        y = ops.concat_channels([Tensor(a), Tensor(b)])
        assert y.shape == (5, 4, 4)
        np.testing.assert_array_equal(y.data[:2], a)
        np.testing.assert_array_equal(y.data[2:], b)

    def test_concat_slice_round_trip_bit_exact(self, rng):
        parts = [rng.standard_normal((c, 6, 6)).astype(np.float32) for c in (1, 4, 2)]
        y = ops.concat_channels([Tensor(p) for p in parts])
        offsets = [0, 1, 5, 7]
        for i, p in enumerate(parts):
            back = ops.slice_channels(y, offsets[i], offsets[i + 1])
            assert back.data.tobytes() == p.tobytes()

    def test_spatial_mismatch_names_input(self):
        a = Tensor(np.zeros((1, 4, 4), dtype=np.float32))
        b = Tensor(np.zeros((1, 4, 5), dtype=np.float32))
        with pytest.raises(ShapeError, match="input 1"):
            ops.concat_channels([a, b])


class TestL2NormChannels:
    def test_three_four_five(self):
        x = Tensor(np.array([3.0, 4.0], dtype=np.float32).reshape(2, 1, 1))
        scale = Tensor(np.ones(2, dtype=np.float32))
        y = ops.l2norm_channels(x, scale)
        np.testing.assert_allclose(y.data.reshape(2), [0.6, 0.8], atol=1e-6)

    def test_scale_linearity(self):
        x = Tensor(np.array([3.0, 4.0], dtype=np.float32).reshape(2, 1, 1))
        scale = Tensor(np.full(2, 10.0, dtype=np.float32))
        y = ops.l2norm_channels(x, scale)
        np.testing.assert_allclose(y.data.reshape(2), [6.0, 8.0], atol=1e-5)

    def test_zero_location_stays_zero_with_finite_grad(self):
        x = Tensor(np.zeros((3, 2, 2), dtype=np.float32), requires_grad=True)
        scale = Tensor(np.full(3, 10.0, dtype=np.float32), requires_grad=True)
        y = ops.l2norm_channels(x, scale)
        np.testing.assert_array_equal(y.data, 0.0)
        loss = ops.sum_all(y)
        loss.backward()
        assert np.isfinite(x.grad).all()
        assert np.isfinite(scale.grad).all()


class TestPointwiseAndReductions:
    def test_relu_values(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
        y = ops.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_add_mul_sum(self, rng):
        a = rng.standard_normal((2, 3)).astype(np.float32)
        b = rng.standard_normal((2, 3)).astype(np.float32)
        assert np.allclose(ops.add(Tensor(a), Tensor(b)).data, a + b)
        assert np.allclose(ops.mul(Tensor(a), Tensor(b)).data, a * b)
        assert np.isclose(ops.sum_all(Tensor(a)).item(), a.sum(), rtol=1e-6)

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            ops.narrow(Tensor(np.zeros((3, 2, 2), dtype=np.float32)), 0, 2, 5)


class TestEngineContracts:
    def test_ops_do_not_mutate_inputs(self, rng):
        x = rng.standard_normal((4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        scale = np.abs(rng.standard_normal(4)).astype(np.float32) + 0.1
        snapshots = [x.copy(), w.copy(), b.copy(), scale.copy()]
        tx, tw, tb, ts = Tensor(x), Tensor(w), Tensor(b), Tensor(scale)
        ops.conv2d(tx, tw, tb, pad=1)
        ops.maxpool2x2(tx)
        ops.upsample_bilinear_2x(tx)
        ops.concat_channels([tx, tx])
        ops.l2norm_channels(tx, ts)
        ops.relu(tx)
        for t, snap in zip([tx, tw, tb, ts], snapshots):
            np.testing.assert_array_equal(t.data, snap)

    def test_forward_outputs_finite_on_finite_inputs(self, rng):
        x = Tensor(rng.standard_normal((4, 8, 8)).astype(np.float32) * 100)
        w = Tensor(rng.standard_normal((3, 4, 3, 3)).astype(np.float32) * 100)
        b = Tensor(rng.standard_normal(3).astype(np.float32))
        scale = Tensor(np.full(4, 10.0, dtype=np.float32))
        outs = [
            ops.conv2d(x, w, b, pad=1),
            ops.maxpool2x2(x),
            ops.upsample_bilinear_2x(x),
            ops.l2norm_channels(x, scale),
            ops.relu(x),
        ]
        for t in outs:
            assert np.isfinite(t.data).all()

    def test_gradient_accumulates_across_backward_calls(self, rng):
        p = Tensor(rng.standard_normal((3, 4, 4)).astype(np.float32), requires_grad=True)
        first = ops.sum_all(ops.relu(p))
        first.backward()
        g1 = p.grad.copy()
        second = ops.sum_all(ops.relu(p))
        second.backward()
        np.testing.assert_allclose(p.grad, 2 * g1)

    def test_diamond_graph_accumulates_both_paths(self):
        p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        y = ops.add(ops.mul(p, p), ops.mul(p, p))  # 2 * p^2
        y.backward()
        np.testing.assert_allclose(p.grad, [8.0])
