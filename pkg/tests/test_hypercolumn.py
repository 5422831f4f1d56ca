import numpy as np
import pytest

from labelforge import hypercolumn, scene


def stack_of(blocks):
    return scene.FeatureStack([b.shape[0] for b in blocks], blocks)


class TestBuild:
    def test_single_block_at_target_res_is_identity(self):
        rng = np.random.default_rng(0)
        block = rng.normal(size=(8, 8, 3))
        field = hypercolumn.build(stack_of([block]), 8)
        np.testing.assert_array_equal(field.data, block.astype(np.float32))
        assert field.channels == 3 and field.block_offsets == [0]

    def test_two_by_two_bilinear_against_separable_oracle(self):
        block = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
        field = hypercolumn.build(stack_of([block]), 4)
        got = field.data[:, :, 0]
        # corners reproduce the source exactly
        assert got[0, 0] == 1.0 and got[0, 3] == 2.0
        assert got[3, 0] == 3.0 and got[3, 3] == 4.0
        # separable corner-aligned bilinear oracle
        expect = np.empty((4, 4))
        for ty in range(4):
            for tx in range(4):
                sy = ty * 1 / 3
                sx = tx * 1 / 3
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y0, x0 = min(y0, 0), min(x0, 0)
                fy, fx = sy - y0, sx - x0
                expect[ty, tx] = (
                    block[y0, x0, 0] * (1 - fy) * (1 - fx)
                    + block[y0, x0 + 1, 0] * (1 - fy) * fx
                    + block[y0 + 1, x0, 0] * fy * (1 - fx)
                    + block[y0 + 1, x0 + 1, 0] * fy * fx
                )
        np.testing.assert_allclose(got, expect, atol=1e-6)

    def test_caps_zero_out_low_res_blocks(self):
        rng = np.random.default_rng(1)
        blocks = [rng.normal(size=(4, 4, 6)), rng.normal(size=(8, 8, 6))]
        field = hypercolumn.build(stack_of(blocks), 8, caps=[0, 6])
        assert field.channels == 6
        np.testing.assert_array_equal(field.data, blocks[1].astype(np.float32))

    def test_cap_length_mismatch_raises(self):
        blocks = [np.zeros((4, 4, 2)), np.zeros((8, 8, 2))]
        with pytest.raises(ValueError, match="caps"):
            hypercolumn.build(stack_of(blocks), 8, caps=[1])

    def test_downsampling_blocks_above_target(self):
        block = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        field = hypercolumn.build(stack_of([block]), 2)
        expect = block.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(2, 2, 4).mean(axis=2)
        np.testing.assert_allclose(field.data[:, :, 0], expect, atol=1e-6)

    def test_channel_order_is_block_then_channel(self):
        rng = np.random.default_rng(2)
        blocks = [rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 3))]
        field = hypercolumn.build(stack_of(blocks), 4)
        assert field.block_offsets == [0, 2]
        np.testing.assert_array_equal(field.data[:, :, :2], blocks[0].astype(np.float32))
        np.testing.assert_array_equal(field.data[:, :, 2:], blocks[1].astype(np.float32))


class TestPixel:
    def test_constant_field(self):
        field = hypercolumn.build(stack_of([np.full((4, 4, 5), 7.0)]), 4)
        np.testing.assert_array_equal(hypercolumn.pixel(field, 1, 2), np.full(5, 7.0, np.float32))

    def test_origin_pixel_concatenates_block_origins(self):
        rng = np.random.default_rng(3)
        blocks = [rng.normal(size=(4, 4, 2)), rng.normal(size=(8, 8, 3))]
        field = hypercolumn.build(stack_of(blocks), 8)
        got = hypercolumn.pixel(field, 0, 0)
        expect = np.concatenate([blocks[0][0, 0], blocks[1][0, 0]]).astype(np.float32)
        np.testing.assert_allclose(got, expect, atol=1e-6)

    def test_matches_slicing_oracle(self):
        rng = np.random.default_rng(4)
        field = hypercolumn.build(stack_of([rng.normal(size=(8, 8, 4))]), 8)
        for x, y in [(0, 0), (3, 5), (7, 7)]:
            np.testing.assert_array_equal(hypercolumn.pixel(field, x, y), field.data[y, x])

    def test_bounds(self):
        field = hypercolumn.build(stack_of([np.zeros((4, 4, 1))]), 4)
        with pytest.raises(IndexError):
            hypercolumn.pixel(field, 4, 0)


class TestChannelArithmetic:
    def test_full_scale_formula_reproduces_6080_and_3520(self):
        # 18 blocks, 512 channels in the first 10, StyleGAN-like tail
        channels = [512] * 10 + [256, 256, 128, 128, 64, 64, 32, 32]
        assert hypercolumn.total_channels(channels) == 6080
        caps = [256] * 10 + channels[10:]
        assert hypercolumn.total_channels(channels, caps) == 3520

    def test_desk_config_matches_scene_total(self):
        cfg = scene.SceneConfig()
        _, feats = scene.render(scene.sample_latent(np.random.default_rng(0), cfg), cfg)
        field = hypercolumn.build(feats, cfg.resolution)
        assert field.channels == cfg.total_feature_channels


class TestInvariants:
    def test_upsample_reproduces_source_at_aligned_coordinates(self):
        # integer alignment: (target-1) divisible by (source-1)
        rng = np.random.default_rng(5)
        for src, dst in [(2, 4), (4, 16), (5, 9), (8, 64)]:
            block = rng.normal(size=(src, src, 2))
            up = hypercolumn.bilinear_upsample(block, dst)
            step = (dst - 1) // (src - 1)
            np.testing.assert_allclose(up[::step, ::step], block, atol=1e-5)

    def test_build_is_deterministic(self):
        cfg = scene.SceneConfig()
        _, feats = scene.render(scene.sample_latent(np.random.default_rng(1), cfg), cfg)
        a = hypercolumn.build(feats, cfg.resolution)
        b = hypercolumn.build(feats, cfg.resolution)
        assert np.array_equal(a.data, b.data)
