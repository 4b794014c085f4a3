"""Model construction: presets, initialization law, head sharing, and the
aggregable/non-aggregable parameter partition."""

import numpy as np
import pytest

from netagg.errors import ConfigError, ShapeError
from netagg.models import (
    Model,
    ModelSpec,
    build_bundle,
    forward,
    get_preset,
    init_extractor,
    predict,
)


class TestPresets:
    def test_vgg16_gn_has_13_convs_and_32_groups(self):
        spec = get_preset("vgg16-gn")
        assert spec.num_conv_layers == 13
        assert spec.gn_groups == 32

    def test_vgg_lite_shape(self):
        spec = get_preset("vgg-lite")
        assert [c for c, _ in spec.conv_blocks] == [32, 64, 128, 128]
        assert spec.gn_groups == 8
        assert spec.head_dims == (128,)
        assert spec.flat_features == 512  # 128 channels x 2 x 2 after 4 pools

    def test_unknown_preset_raises(self):
        with pytest.raises(ConfigError):
            get_preset("resnet")

    def test_groups_must_divide_all_channels(self):
        with pytest.raises(ConfigError):
            ModelSpec(name="bad", conv_blocks=((12, 1), (24, 1)), gn_groups=8, head_dims=(16,))


class TestBuildBundle:
    def test_deterministic(self):
        a = build_bundle(get_preset("vgg-lite"), 2, seed=7)
        b = build_bundle(get_preset("vgg-lite"), 2, seed=7)
        for pa, pb in zip([*a[0], a[1], a[2]], [*b[0], b[1], b[2]]):
            assert pa.allclose(pb, rtol=0.0, atol=0.0)

    def test_different_seeds_differ(self):
        a = build_bundle(get_preset("vgg-lite"), 1, seed=0)
        b = build_bundle(get_preset("vgg-lite"), 1, seed=1)
        assert not a[0][0].allclose(b[0][0])

    def test_extractors_share_keys_shapes_flags(self):
        exts, star, _ = build_bundle(get_preset("vgg-lite"), 3, seed=0)
        ref = exts[0]
        for other in [*exts[1:], star]:
            assert list(other.keys()) == list(ref.keys())
            for k in ref.keys():
                assert other[k].shape == ref[k].shape
                assert other.is_aggregable(k) == ref.is_aggregable(k)

    def test_aggregable_keys_are_exactly_conv_keys(self):
        exts, _, head = build_bundle(get_preset("vgg-lite"), 2, seed=0)
        agg = set(exts[0].aggregable_keys())
        conv = {k for k in exts[0].keys() if k.startswith("conv")}
        assert agg == conv
        assert all(k.startswith("gn") for k in exts[0].non_aggregable_keys())
        assert not any(head.is_aggregable(k) for k in head.keys())

    def test_init_statistics_match_fan_in_law(self):
        # He-uniform with bound sqrt(1/fan_in): variance = bound^2/3 = 1/(3*fan_in)
        spec = get_preset("vgg-lite")
        rng = np.random.default_rng(123)
        samples = np.concatenate(
            [init_extractor(spec, np.random.default_rng([123, i]), "probe")["conv2.weight"].reshape(-1)
             for i in range(4)]
        )
        assert samples.size >= 10_000
        fan_in = 64 * 9  # conv2 maps 64 -> 128 channels (0-based layer ids)
        var = samples.var()
        assert abs(var - 1 / (3 * fan_in)) / (1 / (3 * fan_in)) < 0.2
        assert np.abs(samples).max() <= np.sqrt(1 / fan_in) + 1e-7

    def test_biases_zero_gamma_one_beta_zero(self):
        exts, _, head = build_bundle(get_preset("vgg-lite"), 1, seed=0)
        e = exts[0]
        assert not e["conv1.bias"].any()
        np.testing.assert_array_equal(e["gn1.gamma"], 1.0)
        np.testing.assert_array_equal(e["gn1.beta"], 0.0)
        assert not head["fc1.bias"].any()

    def test_n_must_be_positive(self):
        with pytest.raises(ConfigError):
            build_bundle(get_preset("vgg-lite"), 0, seed=0)


class TestForward:
    def test_zero_batch_constant_finite_logits(self):
        exts, _, head = build_bundle(get_preset("vgg-lite"), 1, seed=3)
        logits = forward(get_preset("vgg-lite"), exts[0], head, np.zeros((4, 1, 32, 32), np.float32))
        assert logits.shape == (4, 10)
        assert np.all(np.isfinite(logits))
        assert np.allclose(logits, logits[0])  # constant input -> constant output

    def test_forward_deterministic(self, rng):
        exts, _, head = build_bundle(get_preset("vgg-lite"), 1, seed=3)
        x = rng.random((2, 1, 32, 32), dtype=np.float32)
        a = forward(get_preset("vgg-lite"), exts[0], head, x)
        b = forward(get_preset("vgg-lite"), exts[0], head, x)
        assert np.array_equal(a, b)

    def test_extractor_perturbation_changes_logits(self, rng):
        spec = get_preset("vgg-lite")
        exts, _, head = build_bundle(spec, 1, seed=3)
        x = rng.random((2, 1, 32, 32), dtype=np.float32)
        base = forward(spec, exts[0], head, x)
        other = exts[0].copy()
        other["conv1.weight"][0, 0, 0, 0] += 1.0
        assert not np.array_equal(forward(spec, other, head, x), base)

    def test_bad_input_shape_raises(self):
        exts, _, head = build_bundle(get_preset("vgg-lite"), 1, seed=0)
        with pytest.raises(ShapeError):
            forward(get_preset("vgg-lite"), exts[0], head, np.zeros((1, 3, 32, 32), np.float32))


class TestPredict:
    def test_argmax(self):
        assert predict(np.array([[0.1, 0.9, 0.0]]))[0] == 1

    def test_tie_breaks_to_lowest_index(self):
        assert predict(np.zeros((3, 10))).tolist() == [0, 0, 0]

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((20, 10))
        assert np.array_equal(predict(logits), predict(logits + 5.0))


class TestHeadSharing:
    def test_single_head_object_visible_through_all_models(self, rng):
        spec = get_preset("vgg-lite")
        exts, star, head = build_bundle(spec, 2, seed=5)
        models = [Model(spec, e, head) for e in exts] + [Model(spec, star, head)]
        x = rng.random((1, 1, 32, 32), dtype=np.float32)
        before = [m.forward(x).copy() for m in models]
        models[0].head["fc1.bias"][:] += 3.0  # mutate through one model (last layer)
        after = [m.forward(x) for m in models]
        for b, a in zip(before, after):
            np.testing.assert_allclose(a, b + 3.0, rtol=1e-5)
