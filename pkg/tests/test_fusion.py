"""Channel rules, adjacency locality, and gradient flow of level fusion."""

import numpy as np
import pytest

from pyradet import ops
from pyradet.backbone import FeaturePyramid, PyramidLevel
from pyradet.exceptions import ConfigError
from pyradet.fusion import ContextTexture, FusionConfig
from pyradet.tensor import Tensor


def make_pyramid(rng, level_channels, base_size=16, requires_grad=False):
    levels = []
    size = base_size
    stride = 4
    for c in level_channels:
        data = rng.standard_normal((c, size, size)).astype(np.float32)
        levels.append(PyramidLevel(feature=Tensor(data, requires_grad=requires_grad), stride=stride))
        size //= 2
        stride *= 2
    return FeaturePyramid(levels=levels)


def make_fusion(level_channels, n=64, seed=0):
    return ContextTexture(FusionConfig(reduced_channels=n), list(level_channels), np.random.default_rng(seed))


class TestConfig:
    def test_rejects_non_multiple_of_eight(self):
        with pytest.raises(ConfigError, match="multiple of 8"):
            FusionConfig(reduced_channels=20)

    def test_neighbor_channels(self):
        assert FusionConfig(reduced_channels=64).neighbor_channels == 8
        assert FusionConfig(reduced_channels=256).neighbor_channels == 32


class TestChannelRule:
    def test_interior_level_three_blocks(self, rng):
        pyramid = make_pyramid(rng, [8, 16, 32])
        fusion = make_fusion([8, 16, 32], n=64)
        fused = fusion.fuse_level(pyramid, 1)
        assert fused.shape == (64 + 8 + 8, 8, 8)

    def test_boundary_level_two_blocks(self, rng):
        pyramid = make_pyramid(rng, [8, 16, 32])
        fusion = make_fusion([8, 16, 32], n=64)
        assert fusion.fuse_level(pyramid, 0).shape[0] == 72
        assert fusion.fuse_level(pyramid, 2).shape[0] == 72

    def test_single_level_center_only(self, rng):
        pyramid = make_pyramid(rng, [8])
        fusion = make_fusion([8], n=64)
        assert fusion.fuse_level(pyramid, 0).shape[0] == 64

    def test_full_pyramid_channel_counts(self, rng):
        pyramid = make_pyramid(rng, [8, 16, 32])
        fused = make_fusion([8, 16, 32], n=64).fuse(pyramid)
        assert [f.shape[0] for f in fused.features] == [72, 80, 72]

    @pytest.mark.parametrize("levels", [1, 2, 3, 4])
    @pytest.mark.parametrize("n", [16, 64])
    def test_channel_formula(self, rng, levels, n):
        chans = [8] * levels
        pyramid = make_pyramid(rng, chans, base_size=32)
        fusion = make_fusion(chans, n=n)
        fused = fusion.fuse(pyramid)
        for li, f in enumerate(fused.features):
            neighbors = int(li > 0) + int(li < levels - 1)
            assert f.shape[0] == n + neighbors * (n // 8)

    def test_resolution_preserved(self, rng):
        pyramid = make_pyramid(rng, [8, 16, 32], base_size=32)
        fused = make_fusion([8, 16, 32]).fuse(pyramid)
        for orig, f in zip(pyramid.features, fused.features):
            assert f.shape[1:] == orig.shape[1:]

    def test_zero_weights_give_zero_output(self, rng):
        pyramid = make_pyramid(rng, [8, 16, 32])
        fusion = make_fusion([8, 16, 32])
        for p in fusion.named_parameters().values():
            p.data = np.zeros_like(p.data)
        fused = fusion.fuse(pyramid)
        for f in fused.features:
            np.testing.assert_array_equal(f.data, 0.0)

    def test_level_out_of_range(self, rng):
        pyramid = make_pyramid(rng, [8, 16])
        fusion = make_fusion([8, 16])
        with pytest.raises(IndexError):
            fusion.fuse_level(pyramid, 2)


class TestLocality:
    def test_only_adjacent_levels_contribute(self, rng):
        chans = [4, 8, 8, 16]
        pyramid = make_pyramid(rng, chans, base_size=32)
        fusion = make_fusion(chans, n=16)
        base = fusion.fuse_level(pyramid, 0).data.tobytes()

        # Perturbing two levels away must leave the fused level bit-unchanged.
        far = pyramid.features[2]
        far.data = far.data + 5.0
        assert fusion.fuse_level(pyramid, 0).data.tobytes() == base

        # Perturbing the adjacent deeper level must change it.
        near = pyramid.features[1]
        near.data = near.data + 5.0
        assert fusion.fuse_level(pyramid, 0).data.tobytes() != base

    def test_shallow_neighbor_contributes(self, rng):
        chans = [4, 8, 8]
        pyramid = make_pyramid(rng, chans, base_size=32)
        fusion = make_fusion(chans, n=16)
        base = fusion.fuse_level(pyramid, 1).data.tobytes()
        pyramid.features[0].data = pyramid.features[0].data + 3.0
        assert fusion.fuse_level(pyramid, 1).data.tobytes() != base


class TestGradientFlow:
    def test_gradient_reaches_all_three_sources(self, rng):
        chans = [4, 8, 8]
        pyramid = make_pyramid(rng, chans, base_size=32, requires_grad=True)
        fusion = make_fusion(chans, n=16, seed=5)
        fused = fusion.fuse_level(pyramid, 1)
        weights = Tensor(rng.standard_normal(fused.shape).astype(np.float32))
        loss = ops.sum_all(ops.mul(fused, weights))
        loss.backward()
        for feat in pyramid.features:
            assert feat.grad is not None
            assert np.abs(feat.grad).max() > 0.0

    def test_finite_difference_spot_check(self, rng):
        chans = [4, 8, 8]
        pyramid = make_pyramid(rng, chans, base_size=32, requires_grad=True)
        fusion = make_fusion(chans, n=16, seed=5)
        weights = rng.standard_normal((16 + 2 + 2, 16, 16)).astype(np.float32)

        def scalar():
            fused = fusion.fuse_level(pyramid, 1)
            return float((fused.data * weights).sum())

        fused = fusion.fuse_level(pyramid, 1)
        loss = ops.sum_all(ops.mul(fused, Tensor(weights)))
        loss.backward()

        h = 1e-2  # float32 forward; coarse step keeps rounding noise small
        for level in range(3):
            feat = pyramid.features[level]
            idx = tuple(rng.integers(0, s) for s in feat.shape)
            original = feat.data[idx]
            feat.data = feat.data.copy()
            feat.data[idx] = original + h
            f_plus = scalar()
            feat.data[idx] = original - h
            f_minus = scalar()
            feat.data[idx] = original
            numeric = (f_plus - f_minus) / (2 * h)
            assert feat.grad[idx] == pytest.approx(numeric, rel=2e-2, abs=2e-3)
