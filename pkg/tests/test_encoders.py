import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from medimp.config import FreezePolicy, ImageEncoderConfig, TextEncoderConfig
from medimp.encoders import (
    ImageEncoder,
    ParameterStore,
    TextEncoder,
    apply_freeze_policy,
    attention_pool_3d,
    encode_image,
    encode_text,
    inflate_kernel,
)
from medimp.exceptions import ConfigError, ShapeError, VolumeError
from medimp.imaging import Volume
from medimp.numerics import AttentionParams, checkable_parameters, conv3d, grad_check
from medimp.promptgen import build_vocab, tokenize

SMALL_IMAGE = ImageEncoderConfig(input_shape=(6, 6, 6), widths=(4, 8), blocks=(1, 1), embed_dim=4, pool_heads=2)
SMALL_TEXT = TextEncoderConfig(layers=2, width=8, heads=2, ff_width=16, max_len=8, embed_dim=4)


def _conv2d_oracle(x, k):
    windows = sliding_window_view(x, k.shape[2:], axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", windows, k)


class TestInflation:
    def test_depth_one_is_identity(self):
        k = np.random.default_rng(0).normal(size=(2, 3, 3, 3))
        np.testing.assert_array_equal(inflate_kernel(k, 1)[:, :, 0], k)

    def test_zero_kernel(self):
        assert not inflate_kernel(np.zeros((2, 2, 3, 3)), 4).any()

    def test_bad_depth(self):
        with pytest.raises(ShapeError):
            inflate_kernel(np.zeros((1, 1, 3, 3)), 0)

    @pytest.mark.parametrize("size", [1, 3])
    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_depth_constant_input_matches_2d(self, size, depth):
        rng = np.random.default_rng(10 * size + depth)
        k2d = rng.normal(size=(2, 3, size, size))
        plane = rng.normal(size=(3, 7, 6))
        volume = np.repeat(plane[:, None], 5, axis=1)
        out = conv3d(volume, inflate_kernel(k2d, depth)).data
        expected = _conv2d_oracle(plane, k2d)
        for z in range(out.shape[1]):
            np.testing.assert_allclose(out[:, z], expected, atol=1e-6)

    def test_load_inflated(self):
        encoder = ImageEncoder(SMALL_IMAGE)
        rng = np.random.default_rng(1)
        weights2d = {}
        for p in encoder.parameters():
            if p.ndim == 5:
                weights2d[p.name] = rng.normal(size=p.shape[:2] + p.shape[3:])
        weights2d["image.stem.bias"] = np.arange(4.0)
        before = encoder.pos_embedding.data.copy()
        loaded = encoder.load_inflated(weights2d)
        assert set(loaded) == set(weights2d)
        depth = encoder.stem_weight.shape[2]
        np.testing.assert_allclose(encoder.stem_weight.data[:, :, 1], weights2d["image.stem.weight"] / depth)
        np.testing.assert_array_equal(encoder.stem_bias.data, np.arange(4.0))
        np.testing.assert_array_equal(encoder.pos_embedding.data, before)

    def test_load_inflated_shape_mismatch(self):
        encoder = ImageEncoder(SMALL_IMAGE)
        with pytest.raises(ShapeError):
            encoder.load_inflated({"image.stem.weight": np.zeros((5, 1, 3, 3))})


def _identity_attention(d):
    eye, zero = np.eye(d), np.zeros(d)
    return AttentionParams(eye, zero, eye, zero, eye, zero, eye, zero)


class TestAttentionPool:
    def test_single_position(self):
        f = np.array([0.2, -0.4, 1.1, 0.7])
        out = attention_pool_3d(f.reshape(4, 1, 1, 1), np.zeros((2, 4)), _identity_attention(4), 2)
        np.testing.assert_allclose(out.data, f, atol=1e-12)

    def test_identical_positions(self):
        f = np.array([0.2, -0.4, 1.1, 0.7])
        grid = np.tile(f.reshape(4, 1, 1, 1), (1, 2, 2, 2))
        out = attention_pool_3d(grid, np.zeros((9, 4)), _identity_attention(4), 2)
        np.testing.assert_allclose(out.data, f, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        store = ParameterStore(seed=3)
        attn = store.attention("pool", 4, 6)
        feats = rng.normal(size=(4, 2, 2, 2))
        perm = rng.permutation(8)
        shuffled = feats.reshape(4, 8)[:, perm].reshape(4, 2, 2, 2)
        a = attention_pool_3d(feats, np.zeros((9, 4)), attn, 2).data
        b = attention_pool_3d(shuffled, np.zeros((9, 4)), attn, 2).data
        np.testing.assert_allclose(a, b, atol=1e-10)
        assert a.shape == (6,)


class TestImageEncoder:
    def test_default_feature_grid(self):
        encoder = ImageEncoder(ImageEncoderConfig())
        assert encoder.feature_shape == (64, 2, 4, 4)
        assert encoder.pos_embedding.shape == (33, 64)

    def test_deterministic_and_shaped(self):
        encoder = ImageEncoder(SMALL_IMAGE)
        v = Volume(voxels=np.random.default_rng(4).uniform(size=(6, 6, 6)), normalized=True)
        a, b = encode_image(v, encoder), encode_image(v, encoder)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4,)

    def test_same_seed_same_weights(self):
        a, b = ImageEncoder(SMALL_IMAGE, ParameterStore(7)), ImageEncoder(SMALL_IMAGE, ParameterStore(7))
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_extent_mismatch(self):
        encoder = ImageEncoder(SMALL_IMAGE)
        with pytest.raises(ShapeError):
            encode_image(Volume(voxels=np.zeros((6, 6, 5)), normalized=True), encoder)

    def test_requires_normalized_volume(self):
        with pytest.raises(VolumeError):
            encode_image(Volume(voxels=np.zeros((6, 6, 6))), ImageEncoder(SMALL_IMAGE))

    def test_gradients(self):
        config = SMALL_IMAGE.model_copy(update={"activation": "gelu"})
        encoder = ImageEncoder(config, ParameterStore(seed=5))
        rng = np.random.default_rng(5)
        batch = rng.uniform(size=(2, 6, 6, 6))
        head = rng.normal(size=(2, 4))
        params = checkable_parameters(encoder.parameters())
        err = grad_check(lambda: (encoder(batch) * head).sum(), params, h=1e-4, coords=4, rng=rng)
        assert err < 1e-4


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["the gfr of the patient is high .", "creatinine levels were stable"])


class TestTextEncoder:
    def test_padding_is_inert(self, vocab):
        encoder = TextEncoder(SMALL_TEXT, len(vocab))
        short = tokenize("gfr is high", vocab, 6)
        full = tokenize("gfr is high", vocab, 8)
        a = encoder(short.ids[None], short.mask[None]).data
        b = encoder(full.ids[None], full.mask[None]).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_deterministic(self, vocab):
        encoder = TextEncoder(SMALL_TEXT, len(vocab))
        t = tokenize("creatinine levels were stable", vocab, 8)
        np.testing.assert_array_equal(encode_text(t, encoder), encode_text(t, encoder))
        assert encode_text(t, encoder).shape == (4,)

    def test_all_padding_rejected(self, vocab):
        encoder = TextEncoder(SMALL_TEXT, len(vocab))
        with pytest.raises(ShapeError):
            encoder(np.zeros((1, 8), dtype=np.int64))

    def test_wrong_length_rejected(self, vocab):
        encoder = TextEncoder(SMALL_TEXT, len(vocab))
        with pytest.raises(ShapeError):
            encode_text(tokenize("gfr", vocab, 6), encoder)

    def test_gradients(self, vocab):
        encoder = TextEncoder(SMALL_TEXT, len(vocab), ParameterStore(seed=6))
        batch = np.stack([tokenize(s, vocab, 8).ids for s in ("the gfr is high", "levels were stable .", "patient")])
        head = np.random.default_rng(6).normal(size=(3, 4))
        params = checkable_parameters(encoder.parameters())
        err = grad_check(lambda: (encoder(batch) * head).sum(), params, h=1e-4, coords=4)
        assert err < 1e-4


class TestFreezePolicy:
    def _encoder(self, layers):
        return TextEncoder(SMALL_TEXT.model_copy(update={"layers": layers}), 12)

    def test_first_eleven_of_twelve(self):
        encoder = self._encoder(12)
        trainable = apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="first_k", k=11), 12)
        assert trainable
        assert all(name.startswith("text.blocks.11.") or name == "text.projection.weight" for name in trainable)
        assert "text.projection.weight" in trainable
        assert "text.blocks.11.ff.in.weight" in trainable
        assert not encoder.token_embedding.trainable

    def test_ln_only(self):
        encoder = self._encoder(3)
        trainable = apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="ln_only"), 3)
        expected = {f"text.blocks.{i}.ln{j}.{kind}" for i in range(3) for j in (1, 2) for kind in ("gain", "bias")}
        assert trainable == expected | {"text.projection.weight"}

    def test_ln_only_keeps_embedding_norm_frozen(self):
        encoder = self._encoder(2)
        apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="ln_only"), 2)
        assert not encoder.embed_ln_gain.trainable
        assert not encoder.embed_ln_bias.trainable
        assert encoder.blocks[0].ln1_gain.trainable

    def test_first_zero_trains_everything(self):
        encoder = self._encoder(2)
        trainable = apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="first_k", k=0), 2)
        assert trainable == {p.name for p in encoder.parameters()}

    def test_none(self):
        encoder = self._encoder(2)
        apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="first_k", k=2), 2)
        trainable = apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="none"), 2)
        assert trainable == {p.name for p in encoder.parameters()}

    def test_k_beyond_layers(self):
        encoder = self._encoder(2)
        with pytest.raises(ConfigError):
            apply_freeze_policy(encoder.parameters(), FreezePolicy(mode="first_k", k=3), 2)
