"""
Tests for the masked-autoencoder transformer.
"""

import math

import numpy as np
import pytest

from us_mae import diffcore as dc
from us_mae.diffcore import ParamSet, Tensor
from us_mae.errors import CompatibilityError, UsageError
from us_mae.model import (
    PRESETS,
    ModelConfig,
    add_classifier,
    assemble_decoder_input,
    check_compatible,
    classify_logits,
    decode,
    embed_patches,
    encode,
    init_params,
    mae_loss,
    mhsa,
    param_count,
    param_shapes,
    preset,
    pretrain_forward,
)
from us_mae.patching import MASK_RATIOS, MaskBatch, MaskPlan, sample_mask, to_patches

# Published encoder-block sizes per preset
PUBLISHED_ENCODER_SIZES = {
    "T": 17_000,
    "S": 100_000,
    "M": 795_000,
    "L": 2_700_000,
    "M-dh32": 795_000,
    "M-dh64": 1_200_000,
    "M-dh128": 2_000_000,
}


def hand_block_count(d_model, heads, d_head):
    """Per-layer scalars: QKV + output projection + MLP + two LayerNorms."""
    width = heads * d_head
    qkv = 3 * (d_model * width + width)
    out = width * d_model + d_model
    mlp = d_model * 2 * d_model + 2 * d_model + 2 * d_model * d_model + d_model
    norms = 4 * d_model
    return qkv + out + mlp + norms


class TestPresets:
    """Test named configurations."""

    @pytest.mark.parametrize("name", list(PUBLISHED_ENCODER_SIZES))
    def test_encoder_sizes_within_two_percent(self, name):
        counts = param_count(PRESETS[name])
        published = PUBLISHED_ENCODER_SIZES[name]
        assert abs(counts.encoder_blocks - published) / published <= 0.02

    @pytest.mark.parametrize("name", list(PRESETS))
    def test_encoder_sizes_match_hand_count(self, name):
        config = PRESETS[name]
        expected = config.layers_enc * hand_block_count(config.d_model_enc, config.heads, config.d_head)
        assert param_count(config).encoder_blocks == expected

    def test_exact_counts(self):
        assert param_count(PRESETS["T"]).encoder_blocks == 17_088
        assert param_count(PRESETS["M"]).encoder_blocks == 794_880
        assert param_count(PRESETS["M-dh64"]).encoder_blocks == 1_190_400

    def test_total_is_sum_of_components(self):
        counts = param_count(PRESETS["S"])
        shapes = param_shapes(PRESETS["S"])
        assert counts.total == sum(math.prod(s) for s in shapes.values())

    def test_tiny_decoder(self):
        config = PRESETS["T"]
        assert config.layers_dec == 1
        assert config.d_model_dec == 16

    def test_non_square_query_projection(self):
        shapes = param_shapes(PRESETS["M-dh64"])
        assert shapes["enc.blocks.0.attn.wq"] == (128, 256)
        assert shapes["enc.blocks.0.attn.wo"] == (256, 128)

    def test_sixteen_sample_patches_expand_eightfold(self):
        config = preset("M", patch_size=16)
        assert config.d_model_enc / config.patch_size == 8

    def test_overrides(self):
        config = preset("S", patch_size=64, dropout=None)
        assert config.patch_size == 64
        assert config.dropout == 0.1

    def test_unknown_preset(self):
        with pytest.raises(UsageError):
            preset("XL")

    def test_invalid_patch_size(self):
        with pytest.raises(UsageError):
            preset("M", patch_size=24)

    def test_dict_round_trip(self):
        config = preset("M-dh64-h3", patch_size=16, mask_ratio=0.625)
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestInit:
    """Test parameter initialization."""

    def test_initial_values(self):
        params = init_params(PRESETS["M"], seed=0)
        assert np.all(params["enc.blocks.0.ln1.g"].data == 1.0)
        assert np.all(params["enc.blocks.0.attn.bq"].data == 0.0)
        weights = params["enc.blocks.0.mlp.w1"].data
        assert np.max(np.abs(weights)) <= 0.04 + 1e-7
        assert abs(weights.std() - 0.0176) < 0.002

    def test_seeded(self, tiny_config):
        a = init_params(tiny_config, seed=5)
        b = init_params(tiny_config, seed=5)
        c = init_params(tiny_config, seed=6)
        assert np.array_equal(a["enc.pos"].data, b["enc.pos"].data)
        assert not np.array_equal(a["enc.pos"].data, c["enc.pos"].data)

    def test_parts_do_not_shift_other_values(self, tiny_config):
        full = init_params(tiny_config, seed=3, decoder=True, classifier=True)
        encoder_only = init_params(tiny_config, seed=3, decoder=False)
        assert np.array_equal(full["enc.proj.w"].data, encoder_only["enc.proj.w"].data)

    def test_add_classifier(self, tiny_config):
        pretrained = init_params(tiny_config, seed=1)
        params = add_classifier(pretrained, tiny_config, seed=2)
        assert "dec.mask_token" not in params
        assert params["cls.head.w"].shape == (32, 200)
        assert np.array_equal(params["enc.pos"].data, pretrained["enc.pos"].data)
        assert not np.shares_memory(params["enc.pos"].data, pretrained["enc.pos"].data)

    def test_incompatible_params(self, tiny_config):
        params = init_params(tiny_config, seed=0)
        with pytest.raises(CompatibilityError):
            check_compatible(params, PRESETS["S"], decoder=True)
        with pytest.raises(CompatibilityError):
            check_compatible(params, tiny_config, classifier=True)


class TestEmbedding:
    """Test patch embedding."""

    def test_zero_projection_gives_positions(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0, decoder=False)
        params["enc.proj.w"].data[:] = 0.0
        indices = np.array([3, 7, 8])
        out = embed_patches(params, rng.normal(size=(3, 32)), indices)
        np.testing.assert_array_equal(out.data, params["enc.pos"].data[indices])


class TestAttention:
    """Test multi-head self-attention."""

    def _random_attention(self, rng, d_model, width):
        return ParamSet({
            "a.wq": rng.normal(scale=0.3, size=(d_model, width)),
            "a.bq": rng.normal(scale=0.1, size=width),
            "a.wk": rng.normal(scale=0.3, size=(d_model, width)),
            "a.bk": rng.normal(scale=0.1, size=width),
            "a.wv": rng.normal(scale=0.3, size=(d_model, width)),
            "a.bv": rng.normal(scale=0.1, size=width),
            "a.wo": rng.normal(scale=0.3, size=(width, d_model)),
            "a.bo": rng.normal(scale=0.1, size=d_model),
        })

    def test_single_head_reference(self, rng):
        with dc.precision(np.float64):
            params = self._random_attention(rng, 8, 8)
            x = rng.normal(size=(5, 8))
            out = mhsa(params, "a", Tensor(x), heads=1, d_head=8).data
            p = params.arrays()
            q = x @ p["a.wq"] + p["a.bq"]
            k = x @ p["a.wk"] + p["a.bk"]
            v = x @ p["a.wv"] + p["a.bv"]
            scores = q @ k.T / np.sqrt(8)
            weights = np.exp(scores - scores.max(axis=1, keepdims=True))
            weights /= weights.sum(axis=1, keepdims=True)
            expected = weights @ v @ p["a.wo"] + p["a.bo"]
        np.testing.assert_allclose(out, expected, atol=1e-5)

    def test_zero_queries_and_keys_attend_uniformly(self, rng):
        with dc.precision(np.float64):
            params = self._random_attention(rng, 8, 12)
            for name in ("a.wq", "a.bq", "a.wk", "a.bk"):
                params[name].data[:] = 0.0
            x = rng.normal(size=(6, 8))
            out = mhsa(params, "a", Tensor(x), heads=3, d_head=4).data
            p = params.arrays()
            v = x @ p["a.wv"] + p["a.bv"]
            expected = v.mean(axis=0) @ p["a.wo"] + p["a.bo"]
        np.testing.assert_allclose(out, np.broadcast_to(expected, (6, 8)), atol=1e-5)

    def test_batched_matches_single(self, rng):
        params = self._random_attention(rng, 8, 16)
        x = rng.normal(size=(3, 5, 8))
        batched = mhsa(params, "a", Tensor(x), heads=2, d_head=8).data
        single = mhsa(params, "a", Tensor(x[1]), heads=2, d_head=8).data
        np.testing.assert_allclose(batched[1], single, atol=1e-5)


class TestEncodeDecode:
    """Test encoder and decoder passes."""

    def test_encoder_output_shape(self, rng):
        config = preset("M")
        params = init_params(config, seed=0, decoder=False)
        plan = sample_mask(config.patch_count, 0.75, rng)
        patches = to_patches(rng.normal(size=512), 32)[plan.visible]
        assert encode(params, config, patches, plan.visible).shape == (4, 128)

    def test_inference_is_deterministic(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0)
        patches = rng.normal(size=(16, 32))
        indices = np.arange(16)
        a = encode(params, tiny_config, patches, indices).data
        b = encode(params, tiny_config, patches, indices).data
        assert np.array_equal(a, b)

    def test_training_dropout_changes_output(self, rng):
        config = preset("T", dropout=0.5)
        params = init_params(config, seed=0)
        patches = rng.normal(size=(16, 32))
        clean = encode(params, config, patches, np.arange(16)).data
        noisy = encode(params, config, patches, np.arange(16), np.random.default_rng(0), training=True).data
        assert not np.array_equal(clean, noisy)

    def test_patch_size_mismatch(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0)
        with pytest.raises(UsageError):
            encode(params, tiny_config, rng.normal(size=(4, 16)), np.arange(4))

    def test_decoder_output_shape(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0)
        plan = sample_mask(16, 0.75, rng)
        latents = Tensor(rng.normal(size=(4, 32)))
        assert decode(params, tiny_config, latents, plan).shape == (16, 32)

    def test_plan_latent_mismatch(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0)
        with pytest.raises(UsageError):
            decode(params, tiny_config, Tensor(rng.normal(size=(5, 32))), sample_mask(16, 0.75, rng))

    def test_shared_visible_slots_assemble_identically(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0)
        first = MaskPlan(
            masked=np.setdiff1d(np.arange(16), [1, 5, 9, 13]), visible=np.array([1, 5, 9, 13]), ratio=0.75
        )
        second = MaskPlan(
            masked=np.setdiff1d(np.arange(16), [1, 5, 10, 14]), visible=np.array([1, 5, 10, 14]), ratio=0.75
        )
        shared = rng.normal(size=(2, 32))
        a = assemble_decoder_input(params, tiny_config, Tensor(np.vstack([shared, rng.normal(size=(2, 32))])), first)
        b = assemble_decoder_input(params, tiny_config, Tensor(np.vstack([shared, rng.normal(size=(2, 32))])), second)
        np.testing.assert_array_equal(a.data[[1, 5]], b.data[[1, 5]])
        expected = params["dec.mask_token"].data + params["dec.pos"].data[10]
        np.testing.assert_allclose(a.data[10], expected, rtol=1e-6)

    def test_shape_grid_over_presets(self, rng):
        signals = rng.uniform(-1.0, 1.0, size=(2, 512))
        for name in PRESETS:
            config = preset(name)
            params = init_params(config, seed=0)
            plan = MaskBatch.from_plans([sample_mask(config.patch_count, 0.75, rng) for _ in range(2)])
            loss, recon = pretrain_forward(params, config, signals, plan)
            assert recon.shape == (2, 16, 32)
            assert np.isfinite(loss.item())

    @pytest.mark.parametrize("patch_size", [8, 16, 32, 64])
    @pytest.mark.parametrize("ratio", MASK_RATIOS)
    def test_shape_grid_over_patches_and_ratios(self, rng, patch_size, ratio):
        config = preset("T", patch_size=patch_size, mask_ratio=ratio)
        params = init_params(config, seed=0)
        n = config.patch_count
        plan = MaskBatch.from_plans([sample_mask(n, ratio, rng) for _ in range(2)])
        _, recon = pretrain_forward(params, config, rng.uniform(-1, 1, size=(2, 512)), plan)
        assert recon.shape == (2, n, patch_size)


class TestMaeLoss:
    """Test the masked reconstruction loss."""

    def test_perfect_reconstruction(self, rng):
        target = rng.normal(size=(16, 32))
        assert mae_loss(Tensor(target), target, np.array([0, 4, 9])).item() == 0.0

    def test_constant_offset(self, rng):
        target = rng.normal(size=(16, 32))
        masked = np.array([2, 3, 11])
        recon = target.copy()
        recon[masked] += 0.25
        assert mae_loss(Tensor(recon), target, masked).item() == pytest.approx(0.25, abs=1e-6)

    def test_brute_force(self, rng):
        with dc.precision(np.float64):
            recon = rng.normal(size=(4, 8))
            target = rng.normal(size=(4, 8))
            masked = np.array([1, 3])
            expected = sum(abs(recon[i, j] - target[i, j]) for i in masked for j in range(8)) / 16
            assert mae_loss(Tensor(recon), target, masked).item() == pytest.approx(expected, abs=1e-6)

    def test_visible_slots_ignored(self, rng):
        recon = rng.normal(size=(16, 32))
        target = rng.normal(size=(16, 32))
        masked = np.arange(12)
        perturbed = recon.copy()
        perturbed[12:] += rng.normal(size=(4, 32))
        target_perturbed = target.copy()
        target_perturbed[12:] = 0.0
        base = mae_loss(Tensor(recon), target, masked).item()
        assert mae_loss(Tensor(perturbed), target, masked).item() == base
        assert mae_loss(Tensor(recon), target_perturbed, masked).item() == base

    def test_needs_masked_patch(self, rng):
        with pytest.raises(UsageError):
            mae_loss(Tensor(rng.normal(size=(4, 8))), rng.normal(size=(4, 8)), np.array([], dtype=int))

    def test_end_to_end_gradient(self, short_config, rng):
        """Test the full pre-training loss on 64-sample signals against central differences."""
        params = init_params(short_config, seed=0, decoder=True)
        # Targets stay far from the reconstruction so |.| never switches sign
        signals = rng.uniform(0.6, 1.0, size=(2, 64)) * rng.choice([-1.0, 1.0], size=(2, 64))
        plan = MaskBatch.from_plans([sample_mask(8, 0.75, rng) for _ in range(2)])

        def loss(p):
            return pretrain_forward(p, short_config, signals, plan)[0]

        error = dc.grad_check(loss, params, eps=1e-3, max_elements=512, rng=np.random.default_rng(1))
        assert error <= 1e-3


class TestClassifier:
    """Test classification logits."""

    def test_logit_count(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0, decoder=False, classifier=True)
        logits = classify_logits(params, tiny_config, rng.uniform(-1, 1, size=512))
        assert logits.shape == (200,)
        assert dc.softmax(logits).data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_head_column_permutation(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0, decoder=False, classifier=True)
        signal = rng.uniform(-1, 1, size=512)
        base = classify_logits(params, tiny_config, signal).data
        order = rng.permutation(200)
        params["cls.head.w"].data[:] = params["cls.head.w"].data[:, order]
        params["cls.head.b"].data[:] = params["cls.head.b"].data[order]
        np.testing.assert_allclose(classify_logits(params, tiny_config, signal).data, base[order], rtol=1e-5, atol=1e-6)

    def test_batched_matches_single(self, tiny_config, rng):
        params = init_params(tiny_config, seed=0, decoder=False, classifier=True)
        signals = rng.uniform(-1, 1, size=(3, 512))
        batched = classify_logits(params, tiny_config, signals).data
        np.testing.assert_allclose(batched[2], classify_logits(params, tiny_config, signals[2]).data, atol=1e-5)

    def test_initial_loss_near_uniform(self, tiny_config, small_signals, small_labels):
        from us_mae.signal_synth import dequantize_8bit

        params = init_params(tiny_config, seed=0, decoder=False, classifier=True)
        logits = classify_logits(params, tiny_config, dequantize_8bit(small_signals))
        loss = dc.cross_entropy(logits, small_labels).item()
        assert abs(loss - math.log(200)) < 0.2
