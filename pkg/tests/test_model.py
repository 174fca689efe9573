"""
Model wiring: positions, parameter bookkeeping, encoder/decoder blocks and
teacher-forced forward passes
"""

import numpy as np
import pytest
from pydantic import ValidationError

from config.app_config import ModelConfig
from core import numkit as nk
from core.attention import SiteTrace
from core.exceptions import AlignmentError, ContractError, DimensionError, SequenceLengthError
from core.model import (
    EncodedFeatures, SBATModel, Weights, decoder_step_attention, encoder_block, output_distribution,
    parameter_shapes, positional_encoding,
)
from core.numkit import Parameter, Tensor
from core.synthdata import gen_scenario_sequence
from tests.helpers import small_config
from utils.enums import Variant


def _record(T=6, k=2, d_feat=8, seed=0, num_scenes=5):
    return gen_scenario_sequence(T=T, k=k, d_feat=d_feat, sigma=0.05, seed=seed, num_scenes=num_scenes)


def _layer_norm(x, g, b, eps=1e-5):
    centred = x - x.mean(axis=-1, keepdims=True)
    return centred / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps) * g + b


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestPositionalEncoding:
    def test_first_row(self):
        table = positional_encoding(4, 8).data
        np.testing.assert_array_equal(table[0, 0::2], 0.0)
        np.testing.assert_array_equal(table[0, 1::2], 1.0)

    def test_known_entry(self):
        table = positional_encoding(3, 4).data
        assert table[2, 2] == pytest.approx(np.sin(2 / 100.0))
        assert table[1, 1] == pytest.approx(np.cos(1.0))

    def test_deterministic(self):
        np.testing.assert_array_equal(positional_encoding(7, 6).data, positional_encoding(7, 6).data)

    def test_odd_width(self):
        with pytest.raises(DimensionError):
            positional_encoding(4, 5)


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError):
            ModelConfig(d_model=10, heads=4)

    def test_sparse_variants_need_zero_decoder_alpha(self):
        with pytest.raises(ValidationError):
            ModelConfig(variant=Variant.SBAT, alpha_dec=0.3)

    def test_default_budget_is_quarter_of_keys(self):
        cfg = ModelConfig()
        assert cfg.encoder_budget(32) == 8
        assert cfg.decoder_budget(5) == 2
        assert small_config().encoder_budget(2) == 2

    @pytest.mark.parametrize("variant, cross", [
        (Variant.VANILLA, False), (Variant.SBAT, True), (Variant.SBAT_NO_CM, False),
        (Variant.SBAT_NO_LOCAL, True), (Variant.SBAT_SAMPLE, True),
    ])
    def test_variant_cross_modal_presence(self, variant, cross):
        assert ModelConfig(variant=variant).has_cross_modal is cross


class TestParameters:
    @pytest.mark.parametrize("overrides", [
        {}, {"variant": Variant.VANILLA}, {"variant": Variant.SBAT_NO_CM, "blocks": 2},
        {"cross_modal": True, "variant": Variant.VANILLA}, {"d_model": 32, "heads": 4, "vocab_size": 11},
    ])
    def test_count_matches_closed_form(self, overrides):
        cfg = small_config(**overrides)
        model = SBATModel(cfg)
        assert model.parameter_count() == SBATModel.expected_parameter_count(cfg)

    def test_default_configuration_count(self):
        cfg = ModelConfig()
        d, f, v = 64, 32, 16
        stream = 16 * d * d + 11 * d
        expected = 2 * (f * d + d) + v * d + 2 * (2 * stream + 24 * d * d + 11 * d) + d * v + v
        assert SBATModel.expected_parameter_count(cfg) == expected

    def test_initialisation_is_seeded(self):
        a = SBATModel(small_config(), seed=3)
        b = SBATModel(small_config(), seed=3)
        c = SBATModel(small_config(), seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].value.data, b.params[name].value.data)
        assert not np.array_equal(a.params["embed.W"].value.data, c.params["embed.W"].value.data)

    def test_layer_norm_starts_as_identity(self):
        model = SBATModel(small_config())
        np.testing.assert_array_equal(model.params["enc0.image.ln1.g"].value.data, 1.0)
        np.testing.assert_array_equal(model.params["dec0.ln3.b"].value.data, 0.0)

    def test_dtype_follows_config(self):
        assert SBATModel(small_config()).params["out.W"].value.dtype == np.float64
        assert SBATModel(ModelConfig()).params["out.W"].value.dtype == np.float32

    def test_foreign_parameters_rejected(self):
        params = SBATModel(small_config()).params
        with pytest.raises(ContractError):
            SBATModel(small_config(variant=Variant.SBAT_NO_CM), params=params)


class TestBlocks:
    def test_zero_sublayers_give_zero_output(self):
        cfg = small_config()
        model = SBATModel(cfg)
        for name, param in model.params.items():
            if name.endswith((".Wo", ".ffn.W3", ".ffn.b3")):
                param.value.data[...] = 0.0
        zeros = Tensor(np.zeros((5, cfg.d_model)))
        out = encoder_block(EncodedFeatures(zeros, zeros), model.weights(), cfg)
        np.testing.assert_array_equal(out.image.data, 0.0)
        np.testing.assert_array_equal(out.motion.data, 0.0)

    def test_vanilla_block_matches_direct_computation(self, rng):
        cfg = small_config(variant=Variant.VANILLA)
        model = SBATModel(cfg, seed=2)
        p = {name: param.value.data for name, param in model.params.items()}
        x = rng.normal(size=(4, cfg.d_model))
        out = encoder_block(EncodedFeatures(Tensor(x), Tensor(x)), model.weights(), cfg)

        prefix = "enc0.image"
        Q, K, V = (x @ p[f"{prefix}.self.{w}"] for w in ("Wq", "Wk", "Wv"))
        dh = cfg.head_dim
        heads = [_softmax(Q[:, h * dh:(h + 1) * dh] @ K[:, h * dh:(h + 1) * dh].T / np.sqrt(dh))
                 @ V[:, h * dh:(h + 1) * dh] for h in range(cfg.heads)]
        y = _layer_norm(x + np.concatenate(heads, axis=1) @ p[f"{prefix}.self.Wo"],
                        p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        ffn = np.maximum(0, y @ p[f"{prefix}.ffn.W2"] + p[f"{prefix}.ffn.b2"]) @ p[f"{prefix}.ffn.W3"] \
            + p[f"{prefix}.ffn.b3"]
        expected = _layer_norm(y + ffn, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        np.testing.assert_allclose(out.image.data, expected, rtol=1e-10, atol=1e-12)

    def test_misaligned_streams(self):
        with pytest.raises(AlignmentError):
            EncodedFeatures(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 4))))

    def test_decoder_rejects_empty_prefix(self):
        cfg = small_config()
        model = SBATModel(cfg)
        enc = model.encode_record(_record())
        with pytest.raises(ContractError):
            decoder_step_attention(Tensor(np.zeros((0, cfg.d_model))), enc, model.weights(), cfg)
        with pytest.raises(ContractError):
            model.decode([], enc)

    def test_output_rows_are_distributions(self, rng):
        cfg = small_config()
        model = SBATModel(cfg)
        dists = output_distribution(Tensor(rng.normal(size=(3, cfg.d_model))), model.weights())
        np.testing.assert_allclose(dists.data.sum(axis=1), 1.0, atol=1e-12)

    def test_output_bias_shift_keeps_argmax(self, rng):
        params = {
            "out.W": Parameter.create("out.W", rng.normal(size=(4, 5))),
            "out.b": Parameter.create("out.b", rng.normal(size=(5,))),
        }
        V = Tensor(rng.normal(size=(3, 4)))
        before = output_distribution(V, Weights(params)).data
        params["out.b"].value.data += 7.0
        after = output_distribution(V, Weights(params)).data
        np.testing.assert_array_equal(before.argmax(axis=1), after.argmax(axis=1))
        np.testing.assert_allclose(before, after, rtol=1e-10)


class TestForward:
    def test_teacher_forced_shape(self):
        cfg = small_config()
        record = _record()
        dists = SBATModel(cfg).forward_teacher_forced(record)
        assert dists.shape == (len(record.captions[0]) - 1, cfg.vocab_size)

    def test_composition_of_blocks(self):
        cfg = small_config()
        model = SBATModel(cfg, seed=5)
        record = _record(seed=5)
        caption = record.captions[0]
        w = model.weights()
        feats = encoder_block(model.embed_inputs(record.image_features, record.motion_features, w), w, cfg)
        hidden = decoder_step_attention(model.embed_tokens(caption[:-1], w), feats, w, cfg)
        expected = output_distribution(hidden, w)
        np.testing.assert_array_equal(model.forward_teacher_forced(record).data, expected.data)

    def test_decoder_is_causal(self):
        cfg = small_config()
        model = SBATModel(cfg, seed=1)
        record = _record(seed=1)
        caption = list(record.captions[0])
        base = model.forward_teacher_forced(record).data
        for j in range(1, len(caption) - 1):
            changed = list(caption)
            changed[j] = 3 + (caption[j] - 3 + 1) % (cfg.vocab_size - 3)
            perturbed = model.forward_tokens(record.image_features, record.motion_features, changed).data
            np.testing.assert_allclose(perturbed[:j], base[:j], rtol=1e-12, atol=1e-15)
            assert not np.allclose(perturbed[j:], base[j:])

    def test_causal_self_attention_trace(self):
        cfg = small_config()
        trace = []
        SBATModel(cfg).forward_teacher_forced(_record(), trace=trace)
        site = next(s for s in trace if s.name == "dec0.self")
        for head in site.heads:
            assert np.all(np.triu(head.weights, k=1) == 0.0)

    def test_trace_names_every_site(self):
        trace = []
        SBATModel(small_config()).forward_teacher_forced(_record(), trace=trace)
        names = [site.name for site in trace]
        assert names == ["enc0.image.self", "enc0.motion.self", "enc0.image.cross", "enc0.motion.cross",
                         "dec0.self", "dec0.enc_image", "dec0.enc_motion", "dec0.fuse"]

    def test_caption_must_start_with_bos(self):
        record = _record()
        with pytest.raises(ContractError):
            SBATModel(small_config()).forward_tokens(record.image_features, record.motion_features, [3, 1])

    def test_caption_longer_than_limit(self):
        record = _record()
        with pytest.raises(SequenceLengthError):
            SBATModel(small_config(max_tgt_len=3)).forward_teacher_forced(record)

    def test_source_longer_than_limit(self):
        with pytest.raises(SequenceLengthError):
            SBATModel(small_config(max_src_len=4)).forward_teacher_forced(_record(T=6))

    def test_misaligned_record_features(self):
        model = SBATModel(small_config())
        with pytest.raises(AlignmentError):
            model.encode(np.zeros((5, 8)), np.zeros((6, 8)))

    def test_feature_width_mismatch(self):
        with pytest.raises(DimensionError):
            SBATModel(small_config()).encode(np.zeros((5, 7)), np.zeros((5, 7)))

    def test_cross_modal_layer_changes_output(self):
        cfg = small_config()
        full = SBATModel(cfg, seed=2)
        no_cm_cfg = small_config(variant=Variant.SBAT_NO_CM)
        subset = {name: full.params[name] for name in parameter_shapes(no_cm_cfg)}
        no_cm = SBATModel(no_cm_cfg, params=subset)
        disabled = SBATModel(small_config(cross_modal=False), params=subset)
        record = _record(seed=2)
        a = full.forward_teacher_forced(record).data
        b = no_cm.forward_teacher_forced(record).data
        np.testing.assert_array_equal(disabled.forward_teacher_forced(record).data, b)
        assert not np.allclose(a, b)

    def test_step_log_probs_match_last_row(self):
        model = SBATModel(small_config())
        record = _record()
        enc = model.encode_record(record)
        prefix = record.captions[0][:3]
        log_probs = model.step_log_probs(enc, prefix)
        np.testing.assert_allclose(np.exp(log_probs), model.decode(prefix, enc).data[-1], rtol=1e-12)
        assert log_probs.dtype == np.float64

    def test_gradients_reach_every_parameter(self):
        model = SBATModel(small_config())
        tape = nk.Tape()
        record = _record()
        dists = model.forward_teacher_forced(record, tape=tape)
        targets = record.captions[0][1:]
        loss = nk.scale(nk.sum_all(nk.log(nk.take(dists, list(range(len(targets))), targets))), -1.0)
        buffer = nk.collect_gradients(loss)
        assert set(buffer) == set(model.params)
        assert all(np.any(grad != 0) for grad in buffer.values())


class TestDropout:
    def test_off_without_a_generator(self):
        record = _record(seed=3)
        plain = SBATModel(small_config(), seed=3)
        dropped = SBATModel(small_config(dropout=0.3), params=plain.params)
        np.testing.assert_array_equal(dropped.forward_teacher_forced(record).data,
                                      plain.forward_teacher_forced(record).data)

    def test_seeded_masks_repeat(self):
        record = _record(seed=3)
        model = SBATModel(small_config(dropout=0.3), seed=3)
        first = model.forward_teacher_forced(record, rng=np.random.default_rng(9)).data
        again = model.forward_teacher_forced(record, rng=np.random.default_rng(9)).data
        other = model.forward_teacher_forced(record, rng=np.random.default_rng(10)).data
        np.testing.assert_array_equal(first, again)
        assert not np.allclose(first, other)
        assert not np.allclose(first, model.forward_teacher_forced(record).data)

    def test_zero_rate_ignores_the_generator(self):
        record = _record(seed=3)
        model = SBATModel(small_config(), seed=3)
        np.testing.assert_array_equal(model.forward_teacher_forced(record, rng=np.random.default_rng(9)).data,
                                      model.forward_teacher_forced(record).data)

    def test_rate_must_stay_below_one(self):
        with pytest.raises(ValidationError):
            small_config(dropout=1.0)
