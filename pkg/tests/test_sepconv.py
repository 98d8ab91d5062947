"""The adaptive separable convolution operator against its oracles."""

import numpy as np
import pytest

from sepkern import backend
from sepkern.errors import ContractViolation
from sepkern.gradcheck import (
    central_difference,
    check_operator_gradients,
    check_synthesis_gradients,
    relative_errors,
)
from sepkern.sepconv import (
    OperatorTape,
    SeparableKernelField,
    full2d_oracle,
    interpolate_with_kernels,
    kernel_grads,
    normalization_denominator,
    sepconv_backward,
    sepconv_forward,
    sepconv_forward_batch,
    synthesize_backward,
    synthesize_forward,
)
from sepkern.tensorops import kahan_sum, replicate_pad


def delta_kernels(k, h, w, dtype=np.float32):
    kh = np.zeros((k, h, w), dtype=dtype)
    kh[(k - 1) // 2] = 1.0
    return kh, kh.copy()


def random_instance(rng, c=3, h=8, w=8, k=5, dtype=np.float32):
    img = rng.uniform(0, 1, (c, h, w)).astype(dtype)
    kh = rng.uniform(-0.5, 0.5, (k, h, w)).astype(dtype)
    kv = rng.uniform(-0.5, 0.5, (k, h, w)).astype(dtype)
    return img, kh, kv


def random_field(rng, h, w, k, lo=0.05, hi=0.5, dtype=np.float32):
    return SeparableKernelField(
        *(rng.uniform(lo, hi, (k, h, w)).astype(dtype) for _ in range(4))
    )


class TestForward:
    def test_delta_kernels_reproduce_image(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 6, 7)).astype(np.float32)
        kh, kv = delta_kernels(5, 6, 7)
        out = sepconv_forward(replicate_pad(img, 2), kh, kv)
        assert np.array_equal(out, img)

    def test_uniform_kernels_equal_box_filter(self):
        rng = np.random.default_rng(1)
        k, h, w = 3, 5, 6
        img = rng.uniform(0, 1, (1, h, w)).astype(np.float32)
        kh = np.full((k, h, w), 1.0 / k, dtype=np.float32)
        out = sepconv_forward(replicate_pad(img, 1), kh, kh)
        p = replicate_pad(img.astype(np.float64), 1)
        box = np.zeros((1, h, w))
        for y in range(h):
            for x in range(w):
                box[0, y, x] = p[0, y:y + k, x:x + k].mean()
        assert np.abs(out - box).max() <= 1e-6

    def test_matches_full2d_oracle(self):
        rng = np.random.default_rng(2)
        img, kh, kv = random_instance(rng, 3, 8, 8, 5)
        out = sepconv_forward(replicate_pad(img, 2), kh, kv)
        oracle = full2d_oracle(img, kh, kv)
        assert np.abs(out - oracle).max() <= 1e-5

    def test_linearity_in_image(self):
        rng = np.random.default_rng(3)
        i1, kh, kv = random_instance(rng, 2, 6, 6, 3)
        i2 = rng.uniform(0, 1, i1.shape).astype(np.float32)
        a, b = 0.7, -0.3
        mix = sepconv_forward(replicate_pad((a * i1 + b * i2).astype(np.float32), 1), kh, kv)
        split = a * sepconv_forward(replicate_pad(i1, 1), kh, kv) \
            + b * sepconv_forward(replicate_pad(i2, 1), kh, kv)
        assert np.abs(mix - split).max() <= 1e-5

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        img, kh, kv = random_instance(rng)
        with pytest.raises(ContractViolation):
            sepconv_forward(img, kh, kv)  # unpadded image

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        imgs, khs, kvs = [], [], []
        for _ in range(3):
            img, kh, kv = random_instance(rng, 2, 5, 6, 3)
            imgs.append(replicate_pad(img, 1))
            khs.append(kh)
            kvs.append(kv)
        batch = sepconv_forward_batch(np.stack(imgs), np.stack(khs), np.stack(kvs))
        for i in range(3):
            single = sepconv_forward(imgs[i], khs[i], kvs[i])
            assert np.array_equal(batch[i], single)


class TestOracle:
    def test_delta_kernels_identity(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (1, 4, 4)).astype(np.float32)
        kh, kv = delta_kernels(3, 4, 4)
        assert np.abs(full2d_oracle(img, kh, kv) - img).max() <= 1e-7

    def test_zero_kernels_zero_output(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (1, 4, 4)).astype(np.float32)
        z = np.zeros((3, 4, 4), dtype=np.float32)
        assert np.array_equal(full2d_oracle(img, z, z), np.zeros((1, 4, 4)))


class TestBackendEquivalence:
    @pytest.mark.skipif("ext" not in backend.available_backends(),
                        reason="compiled core not built")
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_forward_and_backward_bitexact_across_backends(self, dtype):
        rng = np.random.default_rng(8)
        img, kh, kv = random_instance(rng, 3, 9, 11, 5, dtype)
        padded = replicate_pad(img, 2)
        fe = sepconv_forward(padded, kh, kv, backend_name="ext")
        fp = sepconv_forward(padded, kh, kv, backend_name="py")
        assert np.array_equal(fe, fp)
        g = rng.uniform(-1, 1, img.shape).astype(dtype)
        tape = OperatorTape(padded, kh, kv)
        for a, b in zip(sepconv_backward(tape, g, backend_name="ext"),
                        sepconv_backward(tape, g, backend_name="py")):
            assert np.array_equal(a, b)

    @pytest.mark.skipif("ext" not in backend.available_backends(),
                        reason="compiled core not built")
    def test_thread_count_does_not_change_bits(self, monkeypatch):
        rng = np.random.default_rng(9)
        img, kh, kv = random_instance(rng, 3, 16, 16, 5)
        padded = replicate_pad(img, 2)
        outs = []
        for threads in ("1", "2", "5"):
            monkeypatch.setenv("SEPKERN_THREADS", threads)
            outs.append(sepconv_forward(padded, kh, kv, backend_name="ext"))
        for out in outs[1:]:
            assert np.array_equal(outs[0], out)


class TestBackward:
    def test_zero_grad_gives_zero_gradients(self):
        rng = np.random.default_rng(10)
        img, kh, kv = random_instance(rng)
        padded = replicate_pad(img, 2)
        gp, gkh, gkv = sepconv_backward(
            OperatorTape(padded, kh, kv), np.zeros_like(img)
        )
        assert not gp.any() and not gkh.any() and not gkv.any()

    def test_delta_kernels_route_single_pixel(self):
        h = w = 5
        k = 3
        rng = np.random.default_rng(11)
        img = rng.uniform(0, 1, (1, h, w)).astype(np.float32)
        padded = replicate_pad(img, 1)
        kh, kv = delta_kernels(k, h, w)
        g = np.zeros((1, h, w), dtype=np.float32)
        g[0, 2, 3] = 1.0
        gp, _, _ = sepconv_backward(OperatorTape(padded, kh, kv), g)
        expect = np.zeros_like(padded)
        expect[0, 3, 4] = 1.0  # center tap maps to padded (y+1, x+1)
        assert np.array_equal(gp, expect)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_difference_oracle_f64(self, seed):
        for res in check_operator_gradients(seed, size=(5, 6), kernel_size=3):
            assert res.passed, f"{res.name}: {res.max_rel_error}"

    def test_finite_difference_f32_path(self):
        rng = np.random.default_rng(12)
        img, kh, kv = random_instance(rng, 2, 5, 5, 3, np.float32)
        padded = replicate_pad(img, 1)
        g = rng.uniform(-1, 1, img.shape).astype(np.float32)
        gp, gkh, gkv = sepconv_backward(OperatorTape(padded, kh, kv), g)
        p64, kh64, kv64 = padded.astype(np.float64), kh.astype(np.float64), kv.astype(np.float64)
        g64 = g.astype(np.float64)

        def loss():
            return float((sepconv_forward(p64, kh64, kv64) * g64).sum())

        for analytic, arr in ((gkh, kh64), (gkv, kv64)):
            numeric = central_difference(loss, arr)
            assert relative_errors(analytic, numeric).max() <= 1e-3

    def test_kernel_grads_matches_full_backward(self):
        rng = np.random.default_rng(13)
        img, kh, kv = random_instance(rng, 3, 6, 7, 5)
        padded = replicate_pad(img, 2)
        g = rng.uniform(-1, 1, img.shape).astype(np.float32)
        _, gkh_full, gkv_full = sepconv_backward(OperatorTape(padded, kh, kv), g)
        gkh, gkv = kernel_grads(padded, kh, kv, g)
        assert np.abs(gkh - gkh_full).max() <= 1e-5
        assert np.abs(gkv - gkv_full).max() <= 1e-5


class TestNormalizationDenominator:
    def test_uniform_kernels_give_two(self):
        h = w = 4
        k = 5
        kf = SeparableKernelField(
            *(np.full((k, h, w), 1.0 / k, dtype=np.float32) for _ in range(4))
        )
        den = normalization_denominator(kf, h, w)
        assert den.shape == (1, h, w)
        assert np.abs(den - 2.0).max() <= 1e-6

    def test_zero_kernels_give_zero(self):
        kf = SeparableKernelField(*(np.zeros((3, 2, 2), np.float32),) * 4)
        assert not normalization_denominator(kf, 2, 2).any()

    def test_matches_f64_oracle(self):
        rng = np.random.default_rng(14)
        h = w = 6
        kf = random_field(rng, h, w, 5, lo=-0.5, hi=0.5)
        den = normalization_denominator(kf, h, w)
        ones = np.ones((1, h, w), dtype=np.float64)
        oracle = (
            full2d_oracle(ones, kf.k1h, kf.k1v)
            + full2d_oracle(ones, kf.k2h, kf.k2v)
        )
        assert np.abs(den - oracle).max() <= 1e-6


class TestInterpolateWithKernels:
    def test_constant_frames_preserved_when_normalized(self):
        rng = np.random.default_rng(15)
        h = w = 6
        kf = random_field(rng, h, w, 5)
        c = np.full((3, h, w), 0.731, dtype=np.float32)
        out = interpolate_with_kernels(c, c, kf, normalized=True)
        assert np.abs(out - 0.731).max() <= 1e-5

    def test_zero_frame2_delta_frame1_reproduces_frame1(self):
        rng = np.random.default_rng(16)
        h, w, k = 5, 6, 3
        i1 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        i2 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        kh, kv = delta_kernels(k, h, w)
        zero = np.zeros_like(kh)
        kf = SeparableKernelField(kh, kv, zero, zero.copy())
        for normalized in (False, True):
            out = interpolate_with_kernels(i1, i2, kf, normalized=normalized)
            assert np.abs(out - i1).max() <= 1e-6

    def test_matches_oracle_quotient(self):
        rng = np.random.default_rng(17)
        h = w = 8
        k = 5
        i1 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        i2 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        kf = random_field(rng, h, w, k)
        out = interpolate_with_kernels(i1, i2, kf, normalized=True)
        ones = np.ones((1, h, w), dtype=np.float64)
        num = full2d_oracle(i1, kf.k1h, kf.k1v) + full2d_oracle(i2, kf.k2h, kf.k2v)
        den = full2d_oracle(ones, kf.k1h, kf.k1v) + full2d_oracle(ones, kf.k2h, kf.k2v)
        assert np.abs(out - num / den).max() <= 1e-5

    def test_rescaling_invariance_of_normalized_output(self):
        rng = np.random.default_rng(18)
        h = w = 6
        i1 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        i2 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
        kf = random_field(rng, h, w, 3)
        base = interpolate_with_kernels(i1, i2, kf, normalized=True)
        for s in (0.25, 3.0):
            scaled = interpolate_with_kernels(
                i1, i2, kf.scaled(np.float32(s)), normalized=True
            )
            assert np.abs(scaled - base).max() <= 1e-5

    def test_unit_mass_normalization_is_noop(self):
        rng = np.random.default_rng(19)
        h = w = 5
        k = 3
        i1 = rng.uniform(0, 1, (1, h, w)).astype(np.float32)
        i2 = rng.uniform(0, 1, (1, h, w)).astype(np.float32)
        # uniform taps chosen so each frame's mass is 1/2, total 1
        kf = SeparableKernelField(
            np.full((k, h, w), 1.0 / k, np.float32),
            np.full((k, h, w), 1.0 / (2 * k), np.float32),
            np.full((k, h, w), 2.0 / k, np.float32),
            np.full((k, h, w), 1.0 / (4 * k), np.float32),
        )
        raw = interpolate_with_kernels(i1, i2, kf, normalized=False)
        norm = interpolate_with_kernels(i1, i2, kf, normalized=True)
        assert np.abs(raw - norm).max() <= 1e-6

    def test_near_zero_denominator_guard(self):
        h = w = 4
        k = 3
        i1 = np.full((1, h, w), 0.5, dtype=np.float32)
        i2 = np.full((1, h, w), 0.25, dtype=np.float32)
        kf = SeparableKernelField(*(np.zeros((k, h, w), np.float32),) * 4)
        out = interpolate_with_kernels(i1, i2, kf, normalized=True)
        assert np.array_equal(out, np.zeros_like(i1))  # numerator passes through


class TestSynthesisGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_finite_difference_f64(self, seed):
        for res in check_synthesis_gradients(seed):
            assert res.passed, f"{res.name}: {res.max_rel_error}"

    def test_unnormalized_gradients(self):
        rng = np.random.default_rng(20)
        h, w, k = 4, 5, 3
        p1 = replicate_pad(rng.uniform(0, 1, (1, h, w)), 1)
        p2 = replicate_pad(rng.uniform(0, 1, (1, h, w)), 1)
        fields = [rng.uniform(-0.5, 0.5, (k, h, w)) for _ in range(4)]
        g = rng.uniform(-1, 1, (1, h, w))

        def loss():
            out, _ = synthesize_forward(
                p1, p2, SeparableKernelField(*fields), normalized=False
            )
            return float((out * g).sum())

        _, tape = synthesize_forward(p1, p2, SeparableKernelField(*fields), False)
        analytic = synthesize_backward(tape, g)
        for got, arr in zip(analytic, fields):
            numeric = central_difference(loss, arr, h=1e-4)
            assert relative_errors(got, numeric).max() <= 1e-6


class TestKernelFieldIO:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(21)
        kf = random_field(rng, 4, 5, 3)
        path = tmp_path / "field.skf1"
        kf.save(path)
        back = SeparableKernelField.load(path)
        for name in ("k1h", "k1v", "k2h", "k2v"):
            assert np.array_equal(getattr(kf, name), getattr(back, name))

    def test_even_kernel_size_rejected(self):
        with pytest.raises(ContractViolation):
            SeparableKernelField(*(np.zeros((4, 2, 2), np.float32),) * 4)

    def test_mismatched_fields_rejected(self):
        good = np.zeros((3, 2, 2), np.float32)
        bad = np.zeros((3, 2, 3), np.float32)
        with pytest.raises(ContractViolation):
            SeparableKernelField(good, good.copy(), good.copy(), bad)
