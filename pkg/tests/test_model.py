import numpy as np
import pytest

from mimcspt.model import (
    VitConfig,
    embed_patches,
    encoder_forward,
    extract_attention_map,
    full_encoder_forward,
    init_params,
    mhsa_forward,
    patchify,
    sincos_pos_embed,
    unpatchify,
    vit_nano,
)
from mimcspt.tensor import Rng, ShapeError, Tensor, grad_check


@pytest.fixture
def nano():
    return vit_nano()


@pytest.fixture
def params(nano):
    return init_params(nano, Rng(0).substream("init"))


def random_image(rng, side=32):
    return rng.uniform(0.0, 1.0, (side, side, 3)).astype(np.float32)


class TestPatchify:
    def test_paper_scale_counts(self):
        img = np.zeros((224, 224, 3), dtype=np.float32)
        tokens = patchify(img, 16)
        assert tokens.shape == (196, 768)

    def test_nano_counts(self):
        tokens = patchify(np.zeros((32, 32, 3), dtype=np.float32), 8)
        assert tokens.shape == (16, 192)

    def test_round_trip_bit_exact(self):
        rng = Rng(1)
        for side, p in ((32, 8), (16, 4), (24, 8)):
            img = random_image(rng, side)
            back = unpatchify(patchify(img, p), p)
            np.testing.assert_array_equal(back, img)

    def test_token_round_trip(self):
        rng = Rng(2)
        tokens = rng.uniform(size=(16, 192)).astype(np.float32)
        np.testing.assert_array_equal(patchify(unpatchify(tokens, 8), 8), tokens)

    def test_zero_tokens_zero_image(self):
        img = unpatchify(np.zeros((16, 192), dtype=np.float32), 8)
        assert img.shape == (32, 32, 3)
        assert not img.any()

    def test_single_token_lands_in_its_grid_cell(self):
        g, p = 4, 8
        for k in (0, 5, 15):
            tokens = np.zeros((16, 192), dtype=np.float32)
            tokens[k] = 1.0
            img = unpatchify(tokens, p)
            r, c = divmod(k, g)
            nz = np.argwhere(img.sum(axis=-1) > 0)
            assert nz[:, 0].min() == r * p and nz[:, 0].max() == r * p + p - 1
            assert nz[:, 1].min() == c * p and nz[:, 1].max() == c * p + p - 1

    def test_indivisible_side_errors(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((30, 30, 3), dtype=np.float32), 8)

    def test_wrong_token_dim_errors(self):
        with pytest.raises(ShapeError):
            unpatchify(np.zeros((16, 100), dtype=np.float32), 8)


class TestSincos:
    def test_origin_row(self):
        emb = sincos_pos_embed(16, 64)
        # position (0,0): every sin block is 0, every cos block is 1
        row = emb[0]
        sin = np.concatenate([row[:16], row[32:48]])
        cos = np.concatenate([row[16:32], row[48:]])
        np.testing.assert_array_equal(sin, np.zeros(32, dtype=np.float32))
        np.testing.assert_array_equal(cos, np.ones(32, dtype=np.float32))

    def test_deterministic(self):
        np.testing.assert_array_equal(sincos_pos_embed(64, 64), sincos_pos_embed(64, 64))

    def test_rows_pairwise_distinct_up_to_4096(self):
        emb = sincos_pos_embed(4096, 64)
        assert np.unique(emb, axis=0).shape[0] == 4096

    def test_indivisible_dim_errors(self):
        with pytest.raises(ShapeError):
            sincos_pos_embed(16, 30)


class TestAttention:
    def test_single_token_attends_to_itself(self, nano, params):
        x = Tensor(Rng(4).normal(size=(1, 1, 64)).astype(np.float32))
        out, scores = mhsa_forward(x, params, "encoder.blocks.0.attn", nano.heads, record=True)
        assert out.shape == (1, 1, 64)
        np.testing.assert_allclose(scores, np.ones((1, nano.heads, 1, 1)))

    def test_rows_sum_to_one(self, nano, params):
        x = Tensor(Rng(5).normal(size=(2, 16, 64)).astype(np.float32))
        _, scores = mhsa_forward(x, params, "encoder.blocks.0.attn", nano.heads, record=True)
        np.testing.assert_allclose(scores.sum(axis=-1),
                                   np.ones((2, nano.heads, 16)), atol=1e-6)

    def test_permutation_equivariance_without_positions(self, nano, params):
        rng = Rng(6)
        x = rng.normal(size=(1, 16, 64)).astype(np.float32)
        perm = rng.permutation(16)
        out1, _ = mhsa_forward(Tensor(x), params, "encoder.blocks.0.attn", nano.heads)
        out2, _ = mhsa_forward(Tensor(x[:, perm]), params, "encoder.blocks.0.attn", nano.heads)
        np.testing.assert_allclose(out2.data, out1.data[:, perm], atol=1e-5)


class TestEncoder:
    def test_token_count_preserved(self, nano, params):
        x = Tensor(Rng(7).normal(size=(2, 4, 64)).astype(np.float32))
        out, _ = encoder_forward(x, params, nano)
        assert out.shape == (2, 4, 64)

    def test_deterministic(self, nano, params):
        x = Rng(8).normal(size=(1, 16, 64)).astype(np.float32)
        a, _ = encoder_forward(Tensor(x), params, nano)
        b, _ = encoder_forward(Tensor(x), params, nano)
        np.testing.assert_array_equal(a.data, b.data)

    def test_empty_visible_set_rejected(self, nano, params):
        with pytest.raises(ShapeError):
            encoder_forward(Tensor(np.zeros((1, 0, 64), dtype=np.float32)), params, nano)

    def test_grad_check_scalar_probe(self, nano, params):
        image = random_image(Rng(9))
        probe_w = Rng(10).normal(size=(1, 16, 64)).astype(np.float32)
        patches = patchify(image, nano.patch_size)[None]

        def f(p):
            tokens = embed_patches(Tensor(patches, dtype=p["encoder.norm.gamma"].dtype),
                                   p, nano)
            latents, _ = encoder_forward(tokens, p, nano)
            return (latents * Tensor(probe_w, dtype=latents.dtype)).sum()

        err = grad_check(f, params, eps=1e-4, max_coords_per_param=3, rng=Rng(11))
        assert err < 1e-4


class TestAttentionMap:
    def test_map_sums_to_one_and_shape(self, nano, params):
        img = random_image(Rng(12))
        amap = extract_attention_map(img, 5, params, nano)
        assert amap.shape == (4, 4)
        assert abs(amap.sum() - 1.0) < 1e-6

    def test_fresh_init_near_uniform(self, nano):
        # trunc-normal(0.02) query/key projections give tiny logits
        params = init_params(nano, Rng(99))
        img = random_image(Rng(13))
        amap = extract_attention_map(img, 0, params, nano)
        assert amap.max() < 2.0 / nano.num_tokens

    def test_ref_index_out_of_range(self, nano, params):
        with pytest.raises(IndexError):
            extract_attention_map(random_image(Rng(14)), 16, params, nano)

    def test_records_normalized_every_layer(self, nano, params):
        img = random_image(Rng(15))
        _, records = full_encoder_forward(img, params, nano, record=True)
        assert len(records) == nano.depth
        for layer in records:
            np.testing.assert_allclose(layer.sum(axis=-1),
                                       np.ones(layer.shape[:-1]), atol=1e-6)


class TestConfig:
    def test_preset_values(self, nano):
        assert (nano.image_size, nano.patch_size, nano.dim, nano.depth,
                nano.heads, nano.decoder_dim, nano.decoder_depth,
                nano.mlp_ratio) == (32, 8, 64, 4, 4, 32, 2, 4)
        assert nano.num_tokens == 16

    def test_invalid_configs_rejected(self):
        with pytest.raises(ShapeError):
            VitConfig(image_size=30, patch_size=8)
        with pytest.raises(ShapeError):
            VitConfig(dim=65, heads=4)

    def test_roundtrip_dict(self, nano):
        assert VitConfig.from_dict(nano.to_dict()) == nano
