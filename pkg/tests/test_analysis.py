import numpy as np
import pytest

from paramop.analysis import (
    count_report,
    effective_receptive_field,
    erf_overlay,
    interpolation_eval,
    theoretical_receptive_field,
    verify_multipath,
    weight_statistics,
)
from paramop.basenet import BaseNetConfig, init_weights
from paramop.corpus import make_corpus
from paramop.errors import ContractViolation
from paramop.hypernet import LearnedSlotSpec, WeightLearningNet, predict_weights


def plain_config(depth, channels, norm=True):
    return BaseNetConfig(
        depth=depth,
        channels=channels,
        downsample_layer=None,
        upsample_layer=None,
        residual_start=None,
        residual_end=None,
        norm_after=None if norm else (),
    )


def random_valid_config(rng, norm=None):
    """A random architecture accepted by the config validator."""
    if rng.random() < 0.5:
        depth = int(rng.choice([8, 10, 12]))
        cfg_norm = () if norm is False else None
        return BaseNetConfig(depth=depth, channels=int(rng.choice([4, 6, 8])), norm_after=cfg_norm)
    depth = int(rng.integers(2, 7))
    if norm is None:
        norm = bool(rng.random() < 0.7)
    return plain_config(depth, int(rng.choice([3, 4, 6])), norm=norm)


def make_net(cfg, mode="all_conv", layer=None, m=1, seed=0, **kw):
    return WeightLearningNet.create(cfg, LearnedSlotSpec(mode, layer), m=m, rng=np.random.default_rng(seed), **kw)


class TestEffectiveReceptiveField:
    def test_depth1_mask_inside_3x3(self):
        cfg = BaseNetConfig(
            depth=1, channels=3, input_channels=4, output_channels=3,
            downsample_layer=None, upsample_layer=None, residual_start=None, residual_end=None, norm_after=(),
        )
        net = make_net(cfg, mode="conv_at", layer=1, m=1)
        img = make_corpus(1, 10, seed=0)[0]
        erf = effective_receptive_field(cfg, net, [0.5], img, (4, 5))
        ys, xs = np.nonzero(erf.mask)
        assert erf.coverage() >= 1
        assert abs(ys - 5).max() <= 1 and abs(xs - 4).max() <= 1

    def test_contained_in_theoretical_rf(self):
        # norm-free nets: the strides/dilations interval is the real bound
        # (instance norm statistics couple all positions, see
        # theoretical_receptive_field)
        nontrivial = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            cfg = random_valid_config(rng, norm=False)
            net = make_net(cfg, m=1, seed=seed)
            img = make_corpus(1, 16, seed=seed)[0]
            point = (int(rng.integers(16)), int(rng.integers(16)))
            erf = effective_receptive_field(cfg, net, [rng.random()], img, point)
            theo = theoretical_receptive_field(cfg, point, 16, 16)
            assert not (erf.mask & ~theo).any(), f"seed {seed}: ERF leaked outside the theoretical bound"
            if not theo.all():
                nontrivial += 1
        assert nontrivial >= 3, "bound was image-wide for nearly all architectures"

    @pytest.mark.parametrize("seed", range(3))
    def test_normed_nets_use_global_bound(self, seed):
        rng = np.random.default_rng(100 + seed)
        cfg = random_valid_config(rng, norm=True)
        net = make_net(cfg, m=1, seed=seed)
        img = make_corpus(1, 16, seed=seed)[0]
        point = (int(rng.integers(16)), int(rng.integers(16)))
        erf = effective_receptive_field(cfg, net, [rng.random()], img, point)
        theo = theoretical_receptive_field(cfg, point, 16, 16)
        assert theo.all()
        assert not (erf.mask & ~theo).any()

    def test_gradmax_pixel_always_in_mask(self):
        rng = np.random.default_rng(3)
        cfg = BaseNetConfig(depth=8, channels=8)
        net = make_net(cfg, m=2, seed=3)
        img = make_corpus(1, 16, seed=3)[0]
        erf = effective_receptive_field(cfg, net, [0.3, 0.7], img, (8, 8))
        assert not erf.degenerate and erf.coverage() >= 1

    def test_degenerate_zero_gradient(self):
        cfg = BaseNetConfig(
            depth=1, channels=3, input_channels=4, output_channels=3,
            downsample_layer=None, upsample_layer=None, residual_start=None, residual_end=None, norm_after=(),
        )
        net = make_net(cfg, mode="conv_at", layer=1, m=1)
        net.params["conv1.A"].data[:] = 0
        net.params["conv1.B"].data[:] = 0
        img = make_corpus(1, 8, seed=4)[0]
        erf = effective_receptive_field(cfg, net, [0.0], img, (3, 3))
        assert erf.degenerate and erf.coverage() == 0

    def test_point_outside_rejected(self):
        cfg = BaseNetConfig(depth=8, channels=4)
        net = make_net(cfg, m=1)
        img = make_corpus(1, 8, seed=5)[0]
        with pytest.raises(ContractViolation):
            effective_receptive_field(cfg, net, [0.5], img, (99, 0))

    def test_overlay_marks_mask(self):
        cfg = BaseNetConfig(depth=8, channels=4)
        net = make_net(cfg, m=1, seed=6)
        img = make_corpus(1, 16, seed=6)[0]
        erf = effective_receptive_field(cfg, net, [0.5], img, (8, 8))
        out = erf_overlay(img, erf)
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
        changed = np.any(out != img, axis=2)
        assert changed[erf.mask].all()


class TestWeightStatistics:
    def test_identical_sets_correlate_one(self):
        cfg = BaseNetConfig(depth=8, channels=4)
        ws = init_weights(cfg, np.random.default_rng(0))
        stats = weight_statistics(ws, ws)
        for s in stats.layers:
            assert s.correlation == pytest.approx(1.0)
            assert s.var_a == s.var_b and s.mean_a == s.mean_b

    def test_independent_kernels_near_zero_correlation(self):
        cfg = BaseNetConfig(depth=8, channels=24)  # >10k scalars on mid layers
        wa = init_weights(cfg, np.random.default_rng(1))
        wb = init_weights(cfg, np.random.default_rng(2))
        stats = weight_statistics(wa, wb)
        big = [s for s in stats.layers if 24 * 24 * 9 <= 24 * 24 * 16]
        assert all(abs(s.correlation) < 0.05 for s in big)

    def test_zero_variance_marker(self):
        cfg = plain_config(2, 3)
        wa = init_weights(cfg, np.random.default_rng(3))
        wb = init_weights(cfg, np.random.default_rng(4))
        wa.kernels[1].data[:] = 0.5
        stats = weight_statistics(wa, wb)
        assert stats.layers[0].correlation is None
        assert stats.layers[1].correlation is not None

    def test_report_row_shape_matches_table_format(self):
        cfg = BaseNetConfig(depth=8, channels=4)
        stats = weight_statistics(init_weights(cfg, np.random.default_rng(5)), init_weights(cfg, np.random.default_rng(6)))
        import json

        rows = json.loads(stats.to_json())
        assert set(rows[0]) == {"layer", "correlation", "mean_a", "mean_b", "var_a", "var_b"}
        assert [r["layer"] for r in rows] == list(range(1, 9))


class TestVerifyMultipath:
    def test_affine_net_passes_32bit(self):
        cfg = BaseNetConfig(depth=8, channels=6)
        net = make_net(cfg, m=2, seed=0, dtype=np.float32)
        rep = verify_multipath(net, trials=50, tol=1e-5)
        assert rep.passed, rep.to_json()

    def test_affine_net_passes_64bit(self):
        cfg = BaseNetConfig(depth=8, channels=6)
        net = make_net(cfg, m=2, seed=1, dtype=np.float64)
        rep = verify_multipath(net, trials=50, tol=1e-10)
        assert rep.passed, rep.to_json()

    def test_fc2R_reports_violation(self):
        cfg = BaseNetConfig(depth=8, channels=6)
        net = make_net(cfg, m=2, seed=2, fc_depth=2, fc_relu=True, dtype=np.float64)
        rep = verify_multipath(net, trials=50, tol=1e-10)
        assert not rep.passed and rep.worst_error > 1e-6

    def test_hand_instance_64bit(self):
        from paramop.autodiff import Tensor
        from paramop.hypernet import multipath_expand
        import paramop.autodiff as ad

        x = Tensor(np.array([[[[1.0]]]]))
        out = multipath_expand(np.array([[3.0]]), np.array([1.0]), [2.0], x, (1, 1, 1, 1))
        direct = ad.conv2d(x, Tensor(np.array([[[[7.0]]]])), padding=0)
        assert np.abs(out.data - direct.data).max() <= 1e-12

    def test_norm_only_net_rejected(self):
        cfg = BaseNetConfig(depth=8, channels=6)
        net = make_net(cfg, mode="norm_at", layer=7, m=1)
        with pytest.raises(ContractViolation):
            verify_multipath(net)


class TestInterpolationEval:
    def _trained_stub(self):
        from paramop.training import TrainConfig

        cfg = TrainConfig(
            operators=["gaussian"], base=BaseNetConfig(depth=8, channels=8),
            patch_size=16, batch_size=1, steps=1, seed=0,
        )
        net = WeightLearningNet.create(cfg.base, cfg.hyper.slot_spec(), m=cfg.gamma_dim, rng=np.random.default_rng(0))
        return cfg, net

    def test_seen_gamma_gap_zero(self):
        cfg, net = self._trained_stub()
        imgs = make_corpus(2, 16, seed=7)
        rep = interpolation_eval(cfg, net, "gaussian", [0.5, 1.0, 2.0], [1.0], imgs)
        assert rep.gaps[1.0] == pytest.approx(0.0, abs=1e-12)

    def test_midpoint_gap_is_mean_difference(self):
        cfg, net = self._trained_stub()
        imgs = make_corpus(2, 16, seed=8)
        rep = interpolation_eval(cfg, net, "gaussian", [1.0, 2.0], [1.5], imgs)
        interp = (rep.train_scores[1.0][0] + rep.train_scores[2.0][0]) / 2
        assert rep.gaps[1.5] == pytest.approx(rep.test_scores[1.5][0] - interp, abs=1e-12)

    def test_extrapolation_rejected(self):
        cfg, net = self._trained_stub()
        with pytest.raises(ContractViolation):
            interpolation_eval(cfg, net, "gaussian", [1.0, 2.0], [0.6], make_corpus(1, 16, seed=9))


class TestCountReport:
    def test_published_all_conv_counts(self):
        rep = count_report(BaseNetConfig(), mode="all_conv", m=2)
        assert rep.conv_count == 696256
        assert rep.norm_count == 2432
        assert rep.fc_count == 2088768
        assert rep.total_saved == 2091200

    def test_cheap_mode_fc_count(self):
        rep = count_report(BaseNetConfig(), mode="norm_at", layer=19, m=2)
        assert rep.predicted_count == 128
        assert rep.fc_count == 384

    def test_zero_m_rejected(self):
        with pytest.raises(ContractViolation):
            count_report(BaseNetConfig(), m=0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_bruteforce_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_valid_config(rng)
        modes = [("all_conv", None), ("all_norm", None)] if cfg.norm_after else [("all_conv", None)]
        mode, layer = modes[rng.integers(len(modes))]
        m = int(rng.integers(1, 4))
        rep = count_report(cfg, mode=mode, layer=layer, m=m)
        # brute force: count scalars of an actual WeightSet and predicted slots
        ws = init_weights(cfg, rng)
        assert rep.conv_count + rep.norm_count == ws.scalar_count()
        net = make_net(cfg, mode=mode, layer=layer, m=m, seed=seed)
        fc_scalars = sum(t.size for name, t in net.named_parameters() if name.startswith("params."))
        shared_scalars = sum(t.size for name, t in net.named_parameters() if name.startswith("shared."))
        assert rep.fc_count == fc_scalars
        assert rep.shared_count == shared_scalars
        assert rep.total_saved == fc_scalars + shared_scalars
