"""End-to-end pipeline: normalization, delayed padding, ensembling."""

import math

import numpy as np
import pytest

from sepkern.errors import ContractViolation
from sepkern.net import KPNet, KPNetConfig
from sepkern.pipeline import (
    ENSEMBLE_SPATIAL_ORDER,
    EnsembleConfig,
    affine_invariance_probe,
    compute_norm_stats,
    ensemble_variants,
    interpolate,
    interpolate_ensemble,
    normalize_image,
    predict_kernels,
    reduce_predictions,
)
from sepkern.tensorops import EPS_SIGMA, kahan_sum


@pytest.fixture(scope="module")
def net():
    cfg = KPNetConfig(levels=3, base_channels=8, kernel_size=5, color_channels=3)
    return KPNet.init(cfg, 42)


@pytest.fixture()
def frames():
    rng = np.random.default_rng(7)
    i1 = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    i2 = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    return i1, i2


class TestNormStats:
    def test_constant_frames_hit_sigma_floor(self):
        c = np.full((3, 4, 4), 0.5, dtype=np.float32)
        stats = compute_norm_stats(c, c)
        assert np.allclose(stats.mean, 0.5)
        assert np.all(stats.std == EPS_SIGMA)

    def test_two_point_population(self):
        i1 = np.zeros((1, 2, 2), dtype=np.float32)
        i2 = np.ones((1, 2, 2), dtype=np.float32)
        stats = compute_norm_stats(i1, i2)
        assert stats.mean[0] == pytest.approx(0.5)
        assert stats.std[0] == pytest.approx(0.5)

    def test_matches_two_pass_f64_oracle(self):
        rng = np.random.default_rng(8)
        i1 = rng.uniform(0, 1, (3, 5, 6)).astype(np.float32)
        i2 = rng.uniform(0, 1, (3, 5, 6)).astype(np.float32)
        stats = compute_norm_stats(i1, i2)
        for c in range(3):
            pooled = [float(v) for v in i1[c].ravel()] + \
                     [float(v) for v in i2[c].ravel()]
            mean = kahan_sum(pooled) / len(pooled)
            var = kahan_sum([(v - mean) ** 2 for v in pooled]) / len(pooled)
            assert stats.mean[c] == pytest.approx(mean, abs=1e-7)
            assert stats.std[c] == pytest.approx(math.sqrt(var), abs=1e-7)

    def test_normalized_frames_have_zero_mean_unit_std(self):
        rng = np.random.default_rng(9)
        i1 = rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)
        i2 = rng.uniform(0.2, 0.9, (3, 8, 8)).astype(np.float32)
        stats = compute_norm_stats(i1, i2)
        pooled = np.concatenate(
            [normalize_image(i1, stats), normalize_image(i2, stats)], axis=1
        ).astype(np.float64)
        assert np.abs(pooled.mean(axis=(1, 2))).max() <= 1e-6
        assert np.abs(pooled.std(axis=(1, 2)) - 1).max() <= 1e-5


class TestInterpolate:
    def test_output_shape_equals_input_shape(self, net, frames):
        out = interpolate(net, *frames)
        assert out.shape == frames[0].shape
        assert np.isfinite(out).all()

    def test_constant_equal_frames_preserved(self, net):
        c = np.full((3, 32, 32), 0.625, dtype=np.float32)
        out = interpolate(net, c, c, normalized_kernels=True)
        assert np.abs(out - 0.625).max() <= 1e-5

    def test_delayed_padding_feeds_unpadded_frames(self, net, frames):
        instr = {}
        interpolate(net, *frames, instrumentation=instr)
        assert instr["net_input_pixels"] == 32 * 32

    def test_legacy_padding_feeds_padded_frames(self, net, frames):
        instr = {}
        out = interpolate(net, *frames, legacy_padding=True,
                          instrumentation=instr)
        assert instr["net_input_pixels"] == 36 * 36
        assert out.shape == frames[0].shape

    def test_golden_self_filtering_vector(self, net):
        # regression lock: i1 == i2 with a fixed random net
        rng = np.random.default_rng(1234)
        img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
        out = interpolate(net, img, img.copy())
        from sepkern.imageio import read_skf1
        import pathlib
        golden = pathlib.Path(__file__).parent / "data" / "pipeline_golden.skf1"
        expect = read_skf1(golden)
        assert np.abs(out - expect).max() <= 1e-5

    def test_mismatched_frames_rejected(self, net):
        a = np.zeros((3, 32, 32), np.float32)
        b = np.zeros((3, 32, 16), np.float32)
        with pytest.raises(ContractViolation):
            interpolate(net, a, b)


class TestAffineInvariance:
    @pytest.mark.parametrize("a,b", [(1.0, 0.0), (2.0, 0.1), (0.1, -0.2),
                                     (3.0, 0.2), (0.5, 0.0)])
    def test_probe_within_tolerance(self, net, frames, a, b):
        report = affine_invariance_probe(net, *frames, a, b)
        assert report.passed, report
        if a == 1.0 and b == 0.0:
            assert report.max_deviation == 0.0

    def test_nonpositive_scale_rejected(self, net, frames):
        with pytest.raises(ContractViolation):
            affine_invariance_probe(net, *frames, 0.0, 0.1)


class TestEnsemble:
    def test_variant_enumeration_prefixes(self):
        v2 = ensemble_variants(2)
        assert [(t.spatial, t.temporal_reverse) for t in v2] == [
            ("identity", False), ("identity", True)
        ]
        v16 = ensemble_variants(16)
        assert len(v16) == 16
        assert len(set(v16)) == 16
        assert [t.spatial for t in v16[::2]] == list(ENSEMBLE_SPATIAL_ORDER)

    def test_count_one_equals_plain_bitexact(self, net, frames):
        plain = interpolate(net, *frames)
        ens = interpolate_ensemble(net, *frames, EnsembleConfig(1, "mean"))
        assert np.array_equal(plain, ens)

    def test_identical_predictions_reduce_to_themselves(self):
        rng = np.random.default_rng(10)
        pred = rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
        for reduction in ("mean", "median"):
            out = reduce_predictions([pred.copy() for _ in range(8)], reduction)
            assert np.array_equal(out, pred)

    def test_two_sample_mean_equals_median(self, net, frames):
        m = interpolate_ensemble(net, *frames, EnsembleConfig(2, "mean"))
        d = interpolate_ensemble(net, *frames, EnsembleConfig(2, "median"))
        assert np.abs(m - d).max() <= 1e-7

    def test_reduction_permutation_invariant(self):
        rng = np.random.default_rng(11)
        preds = [rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
                 for _ in range(8)]
        for reduction in ("mean", "median"):
            base = reduce_predictions(preds, reduction)
            for seed in range(3):
                perm = list(np.random.default_rng(seed).permutation(8))
                shuffled = [preds[i] for i in perm]
                assert np.array_equal(
                    base, reduce_predictions(shuffled, reduction)
                )

    def test_palindromic_input_temporal_reverse_matches_identity(self, net):
        rng = np.random.default_rng(12)
        img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
        plain = interpolate(net, img, img.copy())
        ens = interpolate_ensemble(net, img, img.copy(), EnsembleConfig(2, "mean"))
        assert np.abs(ens - plain).max() <= 1e-6

    def test_all_sixteen_variants_run_and_reduce(self, net, frames):
        for reduction in ("mean", "median"):
            out = interpolate_ensemble(
                net, *frames, EnsembleConfig(16, reduction)
            )
            assert out.shape == frames[0].shape
            assert np.isfinite(out).all()

    def test_invalid_counts_rejected(self):
        with pytest.raises(ContractViolation):
            EnsembleConfig(3, "mean")
        with pytest.raises(ContractViolation):
            EnsembleConfig(4, "mode")


class TestLegacyDelayedEquivalence:
    def test_legacy_mode_kernel_field_shape(self, net, frames):
        kf_delayed, _ = predict_kernels(net, *frames, legacy_padding=False)
        kf_legacy, _ = predict_kernels(net, *frames, legacy_padding=True)
        assert kf_delayed.spatial_shape == kf_legacy.spatial_shape == (32, 32)
