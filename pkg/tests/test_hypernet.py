import numpy as np
import pytest

from paramop import autodiff as ad
from paramop.autodiff import Tensor
from paramop.basenet import BaseNetConfig, forward_base
from paramop.errors import CacheInvalidError, ContractViolation, DimensionError
from paramop.hypernet import (
    ActivationCache,
    LearnedSlotSpec,
    WeightLearningNet,
    build_cache,
    cached_forward,
    multipath_expand,
    predict_cheap,
    predict_weights,
)


def tiny_config(**kw):
    kw.setdefault("depth", 8)
    kw.setdefault("channels", 8)
    return BaseNetConfig(**kw)


def make_net(config=None, mode="all_conv", layer=None, m=2, fc_depth=1, fc_relu=False, seed=0, dtype=np.float32):
    config = config or tiny_config()
    return WeightLearningNet.create(
        config,
        LearnedSlotSpec(mode, layer),
        m=m,
        fc_depth=fc_depth,
        fc_relu=fc_relu,
        rng=np.random.default_rng(seed),
        dtype=dtype,
    )


def weightset_arrays(ws):
    out = {}
    for i, t in ws.kernels.items():
        out[f"conv{i}"] = t.data
    for i, t in ws.scales.items():
        out[f"scale{i}"] = t.data
    for i, t in ws.shifts.items():
        out[f"shift{i}"] = t.data
    return out


class TestPredictWeights:
    def test_zero_gamma_gives_bias(self):
        net = make_net(m=2)
        ws = predict_weights(net, [0.0, 0.0])
        for slot in net.slots:
            b = net.params[f"{slot.name}.B"].data.reshape(slot.shape)
            np.testing.assert_array_equal(ws.kernels[slot.layer].data, b)

    def test_affinity(self):
        net = make_net(m=2, dtype=np.float64)
        rng = np.random.default_rng(1)
        ga, gb = rng.random(2), rng.random(2)
        wa = weightset_arrays(predict_weights(net, ga))
        wb = weightset_arrays(predict_weights(net, gb))
        w0 = weightset_arrays(predict_weights(net, [0.0, 0.0]))
        wab = weightset_arrays(predict_weights(net, ga + gb))
        for k in wab:
            np.testing.assert_allclose(wa[k] + wb[k] - w0[k], wab[k], rtol=1e-12, atol=1e-12)

    def test_matches_affine_oracle(self):
        cfg = BaseNetConfig(
            depth=2, channels=1, input_channels=1, output_channels=1,
            downsample_layer=None, upsample_layer=None, residual_start=None, residual_end=None,
            norm_after=(),
        )
        net = make_net(cfg, mode="conv_at", layer=1, m=2, dtype=np.float64)
        gamma = np.array([0.3, -0.7])
        A = net.params["conv1.A"].data
        B = net.params["conv1.B"].data
        ws = predict_weights(net, gamma)
        np.testing.assert_allclose(ws.kernels[1].data, (A @ gamma + B).reshape(1, 1, 3, 3), rtol=1e-12)

    def test_wrong_gamma_length(self):
        net = make_net(m=2)
        with pytest.raises(DimensionError):
            predict_weights(net, [0.5])

    def test_validates_against_config(self):
        net = make_net()
        ws = predict_weights(net, [0.2, 0.8])
        ws.validate(net.config)

    def test_fc2_is_still_affine(self):
        net = make_net(mode="norm_at", layer=7, m=1, fc_depth=2, fc_relu=False, dtype=np.float64)
        sa, _ = predict_cheap(net, [0.25])
        sb, _ = predict_cheap(net, [0.75])
        sm, _ = predict_cheap(net, [0.5])
        np.testing.assert_allclose(0.5 * sa.data + 0.5 * sb.data, sm.data, rtol=1e-10)

    def test_fc2R_breaks_affinity(self):
        net = make_net(mode="norm_at", layer=7, m=1, fc_depth=2, fc_relu=True, dtype=np.float64)
        sa, _ = predict_cheap(net, [0.0])
        sb, _ = predict_cheap(net, [1.0])
        sm, _ = predict_cheap(net, [0.5])
        assert np.abs(0.5 * sa.data + 0.5 * sb.data - sm.data).max() > 1e-6


class TestSlotPartition:
    def test_only_slot_layer_changes(self):
        cfg = BaseNetConfig()  # default 20-layer net
        net = make_net(cfg, mode="norm_at", layer=19, m=2)
        wa = weightset_arrays(predict_weights(net, [0.1, 0.9]))
        wb = weightset_arrays(predict_weights(net, [0.8, 0.2]))
        changed = {k for k in wa if not np.array_equal(wa[k], wb[k])}
        assert changed == {"scale19", "shift19"}

    def test_channel_slice_partition(self):
        net = make_net(mode="conv_channel1_at", layer=5, m=1)
        wa = weightset_arrays(predict_weights(net, [0.1]))
        wb = weightset_arrays(predict_weights(net, [0.9]))
        changed = {k for k in wa if not np.array_equal(wa[k], wb[k])}
        assert changed == {"conv5"}
        # only the first input-channel slice differs inside the kernel
        diff = wa["conv5"] != wb["conv5"]
        assert diff[:, 0].any() and not diff[:, 1:].any()

    def test_conv_channel2_partition(self):
        net = make_net(mode="conv_channel2_at", layer=5, m=1)
        wa = weightset_arrays(predict_weights(net, [0.1]))
        wb = weightset_arrays(predict_weights(net, [0.9]))
        diff = wa["conv5"] != wb["conv5"]
        assert diff[0].any() and not diff[1:].any()


class TestPredictCheap:
    def test_default_predicts_128_scalars(self):
        net = make_net(BaseNetConfig(), mode="norm_at", layer=19, m=2)
        assert net.predicted_count() == 128
        scale, shift = predict_cheap(net, [0.5, 0.5])
        assert scale.shape == (64,) and shift.shape == (64,)

    def test_zero_gamma_gives_bias(self):
        net = make_net(mode="norm_at", layer=7, m=2)
        scale, shift = predict_cheap(net, [0.0, 0.0])
        b = net.params["norm7.B"].data
        np.testing.assert_array_equal(scale.data, b[:8])
        np.testing.assert_array_equal(shift.data, b[8:])

    def test_requires_norm_slot(self):
        net = make_net(mode="all_conv")
        with pytest.raises(ContractViolation):
            predict_cheap(net, [0.5, 0.5])


class TestMultipath:
    def test_equals_predicted_conv(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            m = rng.integers(1, 4)
            shape = (2, 3, 3, 3)
            n = int(np.prod(shape))
            A = rng.standard_normal((n, m)).astype(np.float32)
            B = rng.standard_normal(n).astype(np.float32)
            gamma = rng.random(m).astype(np.float32)
            x = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
            direct = ad.conv2d(x, Tensor((A @ gamma + B).reshape(shape)), padding=1)
            multi = multipath_expand(A, B, gamma, x, shape, padding=1)
            assert np.abs(direct.data - multi.data).max() <= 1e-5

    def test_zero_gamma_is_bias_path(self):
        rng = np.random.default_rng(3)
        shape = (1, 1, 3, 3)
        A = rng.standard_normal((9, 2)).astype(np.float32)
        B = rng.standard_normal(9).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 1, 5, 5)).astype(np.float32))
        multi = multipath_expand(A, B, [0.0, 0.0], x, shape, padding=1)
        direct = ad.conv2d(x, Tensor(B.reshape(shape)), padding=1)
        np.testing.assert_array_equal(multi.data, direct.data)

    def test_hand_instance(self):
        x = Tensor(np.array([[[[1.0]]]]))
        out = multipath_expand(np.array([[3.0]]), np.array([1.0]), [2.0], x, (1, 1, 1, 1))
        np.testing.assert_allclose(out.data, [[[[7.0]]]], rtol=1e-12)


class TestCachedForward:
    def _inputs(self, rng, h=16, w=16):
        img = Tensor(rng.random((1, 3, h, w)).astype(np.float32))
        edge = Tensor(rng.random((1, 1, h, w)).astype(np.float32))
        return img, edge

    def test_default_net_recomputes_two_layers(self):
        cfg = BaseNetConfig()
        net = make_net(cfg, mode="norm_at", layer=19, m=2)
        rng = np.random.default_rng(5)
        img, edge = self._inputs(rng, 32, 32)
        cache = build_cache(cfg, net, img, edge)
        out, n = cached_forward(cfg, net, cache, [0.4, 0.6])
        assert n == 2
        full = forward_base(cfg, predict_weights(net, [0.4, 0.6]), img, edge)
        assert np.array_equal(out.data, full.data)

    def test_bitwise_equal_over_gammas(self):
        cfg = tiny_config()
        net = make_net(cfg, mode="norm_at", layer=7, m=2)
        rng = np.random.default_rng(6)
        img, edge = self._inputs(rng)
        cache = build_cache(cfg, net, img, edge)
        for _ in range(10):
            gamma = rng.random(2)
            out, _ = cached_forward(cfg, net, cache, gamma)
            full = forward_base(cfg, predict_weights(net, gamma), img, edge)
            assert np.array_equal(out.data, full.data)

    @pytest.mark.parametrize("mode,layer", [("norm_at", 4), ("norm_at", 5), ("conv_at", 5), ("conv_channel1_at", 4)])
    def test_mid_residual_block_cache(self, mode, layer):
        cfg = tiny_config()
        net = make_net(cfg, mode=mode, layer=layer, m=1)
        rng = np.random.default_rng(7)
        img, edge = self._inputs(rng)
        cache = build_cache(cfg, net, img, edge)
        for gamma in ([0.0], [0.3], [1.0]):
            out, _ = cached_forward(cfg, net, cache, gamma)
            full = forward_base(cfg, predict_weights(net, gamma), img, edge)
            assert np.array_equal(out.data, full.data)

    def test_stale_cache_detected(self):
        cfg = tiny_config()
        net = make_net(cfg, mode="norm_at", layer=7, m=1)
        rng = np.random.default_rng(8)
        img, edge = self._inputs(rng)
        cache = build_cache(cfg, net, img, edge)
        net.shared["conv1"].data[0, 0, 0, 0] += 1.0
        with pytest.raises(CacheInvalidError):
            cached_forward(cfg, net, cache, [0.5])

    def test_multi_layer_spec_cannot_cache(self):
        cfg = tiny_config()
        net = make_net(cfg, mode="all_conv", m=1)
        rng = np.random.default_rng(9)
        img, edge = self._inputs(rng)
        with pytest.raises(ContractViolation):
            build_cache(cfg, net, img, edge)
