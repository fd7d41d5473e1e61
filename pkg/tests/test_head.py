"""Tests for head module."""

import numpy as np
import pytest

from fgreid.exceptions import ConfigurationError, ShapeError
from fgreid.head import (
    HeadConfig, HeadParameters, analytic_param_count, apply_attention, attention_maps,
    attentive_pool, channel_weights, classify, describe_layers, finalize_fine, forward,
    global_feature, init_head_parameters, nonlocal_block, param_count,
)
from fgreid.numerics import BatchNormParams, ProjectionParams, channel_project, grad_check, mean_pool
from fgreid.tensor import concat


def _unit_bn(channels):
    return BatchNormParams(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))


@pytest.fixture
def config():
    return HeadConfig(c_backbone=6, c_star=4, num_classes=3)


@pytest.fixture
def features():
    rng = np.random.default_rng(11)
    coarse = rng.normal(size=(2, 2, 4, 3, 6)).astype(np.float32)
    fine = rng.normal(size=(2, 2, 4, 3, 6)).astype(np.float32)
    return coarse, fine


class TestHeadConfig:
    def test_defaults(self):
        config = HeadConfig()
        assert (config.c_backbone, config.c_star, config.c_bar) == (2048, 1024, 256)
        assert config.embedding_dim == 2048

    def test_c_star_divisible_by_four(self):
        with pytest.raises(ConfigurationError):
            HeadConfig(c_star=6)

    def test_counts_positive(self):
        with pytest.raises(ConfigurationError):
            HeadConfig(num_classes=0)

    def test_both_branches_disabled(self):
        with pytest.raises(ConfigurationError):
            HeadConfig(use_gfm=False, use_fgm=False, use_nonlocal=False)

    def test_only_gfm_embedding(self):
        config = HeadConfig(c_star=8, use_fgm=False, use_nonlocal=False)
        assert not config.has_fine_branch
        assert config.embedding_dim == 8

    def test_replace(self, config):
        changed = config.replace(distinct_kq=True)
        assert changed.distinct_kq and not config.distinct_kq
        assert changed.c_star == config.c_star


class TestChannelWeights:
    def test_uniform(self):
        np.testing.assert_allclose(channel_weights(np.ones((2, 4))).data, 0.25)

    def test_known_value(self):
        out = channel_weights(np.array([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-9)

    def test_per_frame_shift_invariant(self):
        a_gap = np.random.default_rng(0).normal(size=(3, 5))
        shifted = a_gap + np.array([[1.0], [-2.0], [7.5]])
        np.testing.assert_allclose(channel_weights(a_gap).data, channel_weights(shifted).data, atol=1e-12)


class TestAttentionMaps:
    def test_constant_input(self):
        s = np.full((2, 3), 1.0 / 3)
        out = attention_maps(np.full((2, 2, 2, 3), 1.7), s)
        assert out.shape == (2, 2, 2, 1)
        np.testing.assert_allclose(out.data, 0.5)

    def test_known_values(self):
        f = np.array([0.0, 2.0]).reshape(1, 1, 2, 1)
        out = attention_maps(f, np.array([[1.0]]))
        np.testing.assert_allclose(out.data.reshape(-1), [0.5, 0.8807970779778823], atol=1e-9)

    def test_min_is_over_whole_clip(self):
        # frame 1 is offset by 10; a per-frame minimum would map both frames alike
        frame = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
        f = np.concatenate([frame, frame + 10.0])
        out = attention_maps(f, np.ones((2, 1))).data
        assert out[0, 0, 0, 0] == pytest.approx(0.5)
        assert out[1, 0, 0, 0] > 0.99

    def test_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(5)
        f = rng.normal(scale=20.0, size=(3, 4, 3, 8)).astype(np.float32)
        out = attention_maps(f, channel_weights(rng.normal(size=(3, 8)))).data
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_channel_weight_shape_mismatch(self):
        with pytest.raises(ShapeError):
            attention_maps(np.ones((2, 2, 2, 3)), np.ones((2, 4)))


class TestApplyAttention:
    def test_ones_identity(self):
        f = np.random.default_rng(0).normal(size=(2, 3, 3, 4))
        np.testing.assert_allclose(apply_attention(f, np.ones((2, 3, 3, 1))).data, f)

    def test_zeros(self):
        out = apply_attention(np.ones((1, 2, 2, 4)), np.zeros((1, 2, 2)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_voxel(self):
        out = apply_attention(np.array([[[[3.0]]]]), np.array([[[[0.5]]]]))
        assert out.data.item() == pytest.approx(1.5)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            apply_attention(np.ones((1, 2, 2, 4)), np.ones((1, 2, 3, 1)))


def _nonlocal_params(rng, c_star, zero=False):
    c_bar = c_star // 4
    shapes = {'theta': (c_star, c_bar), 'delta': (c_star, c_bar), 'beta_proj': (c_bar, c_star)}
    arrays = {}
    for name, (c_in, c_out) in shapes.items():
        arrays[f'{name}.weight'] = np.zeros((c_in, c_out)) if zero else rng.normal(size=(c_in, c_out))
        arrays[f'{name}.bias'] = np.zeros(c_out) if zero else rng.normal(size=c_out)
    return HeadParameters(arrays)


class TestNonlocalBlock:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(1)
        a1 = rng.normal(size=(2, 3, 2, 8))
        a2, w = nonlocal_block(a1, _nonlocal_params(rng, 8, zero=True))
        np.testing.assert_array_equal(a2.data, a1)
        assert w.shape == (12, 12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            a1 = rng.normal(size=(2, 2, 3, 2, 8))
            _, w = nonlocal_block(a1, _nonlocal_params(rng, 8))
            np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_single_position_closed_form(self):
        rng = np.random.default_rng(3)
        params = _nonlocal_params(rng, 8)
        a1 = rng.normal(size=(1, 1, 1, 8))
        a2, w = nonlocal_block(a1, params)
        np.testing.assert_allclose(w.data, [[1.0]])
        value = np.maximum(a1 @ params.arrays['delta.weight'] + params.arrays['delta.bias'], 0.0)
        expected = value @ params.arrays['beta_proj.weight'] + params.arrays['beta_proj.bias'] + a1
        np.testing.assert_allclose(a2.data, expected, atol=1e-10)

    def test_distinct_key_projection(self):
        rng = np.random.default_rng(4)
        params = _nonlocal_params(rng, 8)
        params.arrays['k_proj.weight'] = rng.normal(size=(8, 2))
        params.arrays['k_proj.bias'] = rng.normal(size=2)
        a1 = rng.normal(size=(2, 2, 2, 8))
        _, shared = nonlocal_block(a1, params)
        _, distinct = nonlocal_block(a1, params, distinct_kq=True)
        np.testing.assert_allclose(distinct.data.sum(axis=-1), 1.0, atol=1e-9)
        assert not np.allclose(shared.data, distinct.data)


class TestAttentivePool:
    def test_ones_is_spatial_mean(self):
        a2 = np.random.default_rng(0).normal(size=(2, 3, 2, 4))
        out = attentive_pool(a2, np.ones((2, 3, 2, 1)))
        np.testing.assert_allclose(out.data, mean_pool(a2, {'h', 'w'}).data, atol=1e-12)

    def test_homogeneous_in_maps(self):
        rng = np.random.default_rng(1)
        a2 = rng.normal(size=(2, 2, 2, 3))
        maps = rng.uniform(0.1, 0.9, size=(2, 2, 2, 1))
        base = attentive_pool(a2, maps).data
        np.testing.assert_allclose(attentive_pool(a2, maps * 4.0).data, base / 4.0, atol=1e-12)

    def test_known_value(self):
        a2 = np.array([2.0, 4.0]).reshape(1, 1, 2, 1)
        out = attentive_pool(a2, np.array([0.5, 0.5]).reshape(1, 1, 2, 1))
        assert out.data.item() == pytest.approx(6.0)


class TestGlobalAndFine:
    def test_constant_input(self):
        f_hat, a_gap = global_feature(np.full((3, 2, 2, 4), 2.0), _unit_bn(4), mode='infer')
        assert a_gap.shape == (3, 4)
        np.testing.assert_allclose(f_hat.data, 2.0, atol=1e-4)

    def test_single_pixel(self):
        f = np.array([3.0, 5.0]).reshape(1, 1, 1, 2)
        f_hat, _ = global_feature(f, _unit_bn(2), mode='infer')
        np.testing.assert_allclose(f_hat.data, [3.0, 5.0], atol=1e-4)

    def test_finalize_single_frame(self):
        a3 = np.array([[0.3, -1.2]])
        np.testing.assert_allclose(finalize_fine(a3, _unit_bn(2), mode='infer').data, [0.3, -1.2], atol=1e-5)

    def test_finalize_temporal_mean(self):
        out = finalize_fine(np.array([[1.0], [3.0]]), _unit_bn(1), mode='infer')
        assert out.data.item() == pytest.approx(2.0, abs=1e-4)

    def test_finalize_duplicate_frames(self):
        frame = np.array([[0.4, 0.9, -0.1]])
        single = finalize_fine(frame, _unit_bn(3), mode='infer').data
        double = finalize_fine(np.concatenate([frame, frame]), _unit_bn(3), mode='infer').data
        np.testing.assert_allclose(single, double)


class TestClassify:
    def test_zero_weights_uniform(self):
        out = classify(np.ones(4), ProjectionParams(np.zeros((4, 5)), np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.2)

    def test_known_value(self):
        out = classify(np.zeros(3), ProjectionParams(np.zeros((3, 2)), np.array([0.0, np.log(3.0)])))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-9)


class TestForward:
    def test_default_bundle(self, config, features):
        params = init_head_parameters(config, np.random.default_rng(0))
        bundle = forward(*features, params, config, mode='train', trace=True)
        assert bundle.f_star.shape == (2, 8)
        np.testing.assert_array_equal(bundle.f_star.data, np.concatenate(
            [bundle.f_hat_coarse.data, bundle.f_hat_fine.data], axis=-1))
        for y in (bundle.y1, bundle.y2):
            assert y.shape == (2, 3)
            np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)
        assert bundle.a_maps.shape == (2, 2, 4, 3, 1)
        assert np.all(bundle.a_maps.data > 0) and np.all(bundle.a_maps.data < 1)

        trace = bundle.trace
        assert trace.a_gap.shape == (2, 2, 4)
        np.testing.assert_allclose(trace.s_channel.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(trace.w_affinity.sum(axis=-1), 1.0, atol=1e-6)
        assert trace.w_affinity.shape == (2, 24, 24)
        assert trace.a3.shape == (2, 2, 4)

    def test_single_clip_infer(self, config, features):
        params = init_head_parameters(config, np.random.default_rng(0))
        bundle = forward(features[0][0], features[1][0], params, config, mode='infer')
        assert bundle.f_star.shape == (8,)
        assert bundle.a_maps.shape == (2, 4, 3, 1)

    def test_only_gfm(self, features):
        config = HeadConfig(c_backbone=6, c_star=4, num_classes=3, use_fgm=False, use_nonlocal=False)
        params = init_head_parameters(config, np.random.default_rng(0))
        bundle = forward(features[0], None, params, config)
        assert bundle.f_hat_fine is None and bundle.y2 is None and bundle.a_maps is None
        np.testing.assert_array_equal(bundle.f_star.data, bundle.f_hat_coarse.data)

    def test_without_gfm(self, features):
        config = HeadConfig(c_backbone=6, c_star=4, num_classes=3, use_gfm=False)
        params = init_head_parameters(config, np.random.default_rng(0))
        bundle = forward(*features, params, config)
        assert bundle.f_hat_coarse is None and bundle.y1 is None
        np.testing.assert_array_equal(bundle.f_star.data, bundle.f_hat_fine.data)

    def test_without_channel_weights_uses_uniform(self, features):
        config = HeadConfig(c_backbone=6, c_star=4, num_classes=3, use_channel_weights=False)
        params = init_head_parameters(config, np.random.default_rng(0))
        bundle = forward(*features, params, config, trace=True)
        np.testing.assert_allclose(bundle.trace.s_channel, 0.25)

    def test_without_fgm_matches_all_ones_maps(self, features):
        config = HeadConfig(c_backbone=6, c_star=4, num_classes=3, use_fgm=False)
        params = init_head_parameters(config, np.random.default_rng(0))
        params.arrays['beta_proj.weight'] = np.random.default_rng(1).normal(size=(1, 4)).astype(np.float32)
        bundle = forward(*features, params, config, mode='infer')
        np.testing.assert_array_equal(bundle.a_maps.data, 1.0)

        f_fine = channel_project(features[1], params.projection('reduce_fine'))
        a2, _ = nonlocal_block(f_fine, params)
        expected = finalize_fine(mean_pool(a2, {'h', 'w'}), params.batch_norm('bn_fine'), mode='infer')
        np.testing.assert_allclose(bundle.f_hat_fine.data, expected.data, atol=1e-5)

    def test_deterministic(self, config, features):
        first = forward(*features, init_head_parameters(config, np.random.default_rng(9)), config)
        second = forward(*features, init_head_parameters(config, np.random.default_rng(9)), config)
        assert first.f_star.data.tobytes() == second.f_star.data.tobytes()
        assert first.y2.data.tobytes() == second.y2.data.tobytes()

    def test_spatial_mismatch(self, config, features):
        params = init_head_parameters(config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(features[0], features[1][:, :, :, :2], params, config)

    def test_channel_mismatch(self, config, features):
        params = init_head_parameters(config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(features[0][..., :5], features[1][..., :5], params, config)

    def test_missing_fine_input(self, config, features):
        params = init_head_parameters(config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            forward(features[0], None, params, config)

    def test_gradients(self, config):
        """Whole head in float64 against finite differences."""
        rng = np.random.default_rng(21)
        config = config.replace(num_classes=2)
        base = {name: np.asarray(v, dtype=np.float64)
                for name, v in init_head_parameters(config, rng).arrays.items()}
        base['beta_proj.weight'] = rng.normal(scale=0.5, size=base['beta_proj.weight'].shape)
        # keep the non-local relu inputs well away from zero
        base['theta.bias'][:] = 5.0
        base['delta.bias'][:] = 5.0
        checked = ('reduce_coarse.weight', 'theta.weight', 'beta_proj.weight', 'classifier.weight')
        inputs = {name: base[name] for name in checked}
        inputs['coarse'] = rng.uniform(-1, 1, size=(2, 2, 4, 3, 6))
        inputs['fine'] = rng.uniform(-1, 1, size=(2, 2, 4, 3, 6))

        def op(d):
            arrays = dict(base)
            arrays.update({name: d[name] for name in checked})
            buffers = {name: np.zeros(4) if name.endswith('mean') else np.ones(4)
                       for name in ('bn_coarse.running_mean', 'bn_coarse.running_var',
                                    'bn_fine.running_mean', 'bn_fine.running_var')}
            bundle = forward(d['coarse'], d['fine'], HeadParameters(arrays, buffers), config)
            return concat([bundle.f_star, bundle.y1, bundle.y2], axis=-1)

        assert grad_check(op, inputs, step=1e-5) <= 1e-3


class TestOperationGradients:
    @pytest.mark.parametrize('seed', range(20))
    def test_channel_weights(self, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, size=(2, 3, 4))
        assert grad_check(channel_weights, x) <= 1e-3

    @pytest.mark.parametrize('seed', range(20))
    def test_attention_maps(self, seed):
        rng = np.random.default_rng(seed)
        inputs = {'f': rng.uniform(-1, 1, size=(2, 2, 3, 2, 4)), 's': rng.uniform(0.1, 1, size=(2, 2, 4))}
        # tiny step keeps the clip minimum on the same element
        assert grad_check(lambda d: attention_maps(d['f'], d['s']), inputs, step=1e-6) <= 1e-3

    @pytest.mark.parametrize('seed', range(20))
    def test_attentive_pool(self, seed):
        rng = np.random.default_rng(seed)
        inputs = {'a2': rng.uniform(-1, 1, size=(2, 2, 3, 2, 4)), 'a': rng.uniform(0.2, 1, size=(2, 2, 3, 2, 1))}
        assert grad_check(lambda d: attentive_pool(d['a2'], d['a']), inputs) <= 1e-3

    @pytest.mark.parametrize('distinct_kq', [False, True])
    @pytest.mark.parametrize('seed', range(20))
    def test_nonlocal_block(self, seed, distinct_kq):
        rng = np.random.default_rng(seed)
        layers = ('theta', 'delta', 'beta_proj', 'k_proj') if distinct_kq else ('theta', 'delta', 'beta_proj')
        shapes = {'theta': (8, 2), 'delta': (8, 2), 'k_proj': (8, 2), 'beta_proj': (2, 8)}
        inputs = {f'{layer}.weight': rng.uniform(-0.5, 0.5, size=shapes[layer]) for layer in layers}
        inputs['a1'] = rng.uniform(-0.5, 0.5, size=(2, 2, 2, 8))
        # relu inputs stay positive: |a1 . w| <= 2 < bias
        biases = {f'{layer}.bias': np.full(shapes[layer][1], 5.0) for layer in layers}
        biases['beta_proj.bias'] = rng.uniform(-1, 1, size=8)

        def op(d):
            arrays = dict(biases)
            arrays.update({name: d[name] for name in inputs if name != 'a1'})
            a2, _ = nonlocal_block(d['a1'], HeadParameters(arrays), distinct_kq=distinct_kq)
            return a2

        assert grad_check(op, inputs, step=1e-5) <= 1e-3


class TestForwardInvariants:
    @pytest.mark.parametrize('distinct_kq', [False, True])
    def test_random_forwards(self, distinct_kq):
        rng = np.random.default_rng(31)
        config = HeadConfig(c_backbone=6, c_star=4, num_classes=3, distinct_kq=distinct_kq)
        for _ in range(500):
            params = init_head_parameters(config, rng)
            params.arrays['beta_proj.weight'] = rng.normal(size=params.arrays['beta_proj.weight'].shape)
            coarse = rng.normal(size=(2, 2, 2, 2, 6))
            fine = rng.normal(size=(2, 2, 2, 2, 6))
            bundle = forward(coarse, fine, params, config, trace=True)
            trace = bundle.trace
            np.testing.assert_allclose(trace.s_channel.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(trace.w_affinity.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(bundle.a_maps.data > 0.0) and np.all(bundle.a_maps.data < 1.0)
            np.testing.assert_allclose(bundle.y1.data.sum(axis=-1), 1.0, atol=1e-6)
            np.testing.assert_allclose(bundle.y2.data.sum(axis=-1), 1.0, atol=1e-6)


class TestAccounting:
    def test_default_structure(self, config):
        layers = describe_layers(init_head_parameters(config, np.random.default_rng(0)))
        assert layers['projections'] == ['reduce_coarse', 'reduce_fine', 'theta', 'delta', 'beta_proj']
        assert layers['classifiers'] == ['classifier']
        assert layers['batch_norms'] == ['bn_coarse', 'bn_fine']

    def test_distinct_kq_adds_key_projection(self, config):
        layers = describe_layers(init_head_parameters(config.replace(distinct_kq=True), np.random.default_rng(0)))
        assert 'k_proj' in layers['projections']

    def test_kqv_delta(self):
        config = HeadConfig(c_backbone=2048, c_star=1024, num_classes=625)
        delta = analytic_param_count(config.replace(distinct_kq=True)) - analytic_param_count(config)
        assert delta == 262400
        report = param_count(HeadParameters(), config)
        assert report['kqv_delta'] == 262400

    def test_closed_form_default_total(self):
        config = HeadConfig(c_backbone=2048, c_star=1024, num_classes=625)
        expected = (2 * (2048 * 1024 + 1024) + 2 * (1024 * 256 + 256) + (256 * 1024 + 1024)
                    + (1024 * 625 + 625) + 2 * 2 * 1024)
        assert analytic_param_count(config) == expected

    def test_measured_matches_analytic(self, config):
        params = init_head_parameters(config, np.random.default_rng(0))
        report = param_count(params, config)
        assert report['head_total'] == analytic_param_count(config)
        assert report['backbone_total'] == 0
        assert report['components']['theta'] == 4 * 1 + 1

    def test_empty(self):
        report = param_count(HeadParameters())
        assert report['total'] == 0 and report['components'] == {}
