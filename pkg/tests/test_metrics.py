import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from tosm3d.metrics import (
    HISTOGRAM_L1_THRESHOLD,
    SSIM_K1,
    SSIM_K2,
    corrupt_axis,
    evaluate,
    histogram_similarity,
    nps,
    plane_metrics,
    psnr,
    rmse,
    ssim,
)
from tosm3d.volume import PhantomSpec, make_phantom

seeds = st.integers(0, 2**31)


def shepp(n=32):
    return make_phantom(PhantomSpec("shepp3d", n)).values


class TestPSNR:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).random((4, 4, 4))
        assert psnr(a, a) == float("inf")

    def test_half_level(self):
        assert psnr(np.zeros((4, 4, 4)), np.full((4, 4, 4), 0.5), 1.0) == pytest.approx(6.0206, abs=1e-4)

    def test_direct_formula(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 5, 6, 7))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        rng_b = b.max() - b.min()
        assert psnr(a, b) == pytest.approx(10 * np.log10(rng_b**2 / mse), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_symmetric(self, seed):
        a, b = np.random.default_rng(seed).random((2, 4, 4, 4))
        assert psnr(a, b, 1.0) == pytest.approx(psnr(b, a, 1.0), abs=1e-12)


class TestRMSE:
    def test_identical(self):
        a = np.random.default_rng(2).random((3, 3, 3))
        assert rmse(a, a) == 0.0

    def test_zeros_ones(self):
        assert rmse(np.zeros((3, 3, 3)), np.ones((3, 3, 3))) == 1.0

    def test_direct_formula(self):
        a, b = np.random.default_rng(3).random((2, 4, 5, 6))
        direct = np.sqrt(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size)
        assert rmse(a, b) == pytest.approx(direct, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_triangle(self, seed):
        a, b, c = np.random.default_rng(seed).normal(size=(3, 4, 4, 4))
        assert rmse(a, c) <= rmse(a, b) + rmse(b, c) + 1e-12


class TestSSIM:
    def test_identical(self):
        a = shepp(16)
        assert ssim(a, a) == 1.0

    def test_inverted_contrast(self):
        a = shepp(32)
        assert ssim(1.0 - a, a, data_range=1.0) < 0.5

    @pytest.mark.parametrize("levels", [(0.2, 0.7), (0.5, 0.5), (0.0, 0.9)])
    def test_constants_closed_form(self, levels):
        m1, m2 = levels
        c1 = (SSIM_K1 * 1.0) ** 2
        expected = (2 * m1 * m2 + c1) / (m1**2 + m2**2 + c1)
        assert ssim(np.full((9, 9), m1), np.full((9, 9), m2), data_range=1.0) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("shape", [(24, 24), (16, 16, 16)])
    def test_matches_skimage(self, shape):
        rng = np.random.default_rng(4)
        b = shepp(shape[0])[..., shape[0] // 2] if len(shape) == 2 else shepp(shape[0])
        a = np.clip(b + 0.1 * rng.normal(size=b.shape), 0, 1)
        ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2)
        assert ssim(a, b, window=11, data_range=1.0) == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(seeds, st.floats(0.1, 10))
    def test_scale_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 10, 10))
        assert ssim(k * a, k * b, data_range=k) == pytest.approx(ssim(a, b, data_range=1.0), abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_bounded(self, seed):
        a, b = np.random.default_rng(seed).normal(size=(2, 10, 10))
        assert -1.0 <= ssim(a, b, data_range=2.0) <= 1.0


class TestPlanes:
    def test_report_planes(self):
        truth = shepp(16)
        recon = truth + 0.05 * np.random.default_rng(5).normal(size=truth.shape)
        report = evaluate(recon, truth)
        assert set(report.psnr) == {"transaxial", "sagittal", "coronal", "global"}
        assert report.to_csv().startswith("plane,psnr_db,ssim,rmse\n")
        assert "transaxial" in report.to_text()

    def test_plane_mean_of_slices(self):
        rng = np.random.default_rng(6)
        truth = rng.random((6, 6, 6))
        recon = truth + 0.1 * rng.normal(size=truth.shape)
        p, _, e = plane_metrics(recon, truth, 0, data_range=1.0)
        assert p == pytest.approx(np.mean([psnr(recon[i], truth[i], 1.0) for i in range(6)]))
        assert e == pytest.approx(np.mean([rmse(recon[i], truth[i]) for i in range(6)]))

    def test_only_one_plane_error(self):
        truth = shepp(16)
        recon = truth.copy()
        recon[:, :, 8] += 0.2
        p_trans, _, _ = plane_metrics(recon, truth, 2)
        assert np.isfinite(p_trans) and p_trans == pytest.approx(psnr(recon[:, :, 8], truth[:, :, 8], 1.0))


class TestNPS:
    def test_exact_recon_zero(self):
        t = shepp(16)
        assert not nps(t, t).spectrum.any()

    def test_white_noise_flat(self):
        rng = np.random.default_rng(7)
        d = rng.normal(size=(64, 64, 16))
        res = nps(d, np.zeros_like(d), n_bins=8)
        prof = res.radial_profile
        assert np.max(np.abs(prof / prof.mean() - 1)) <= 0.2

    def test_sinusoid_peak(self):
        n = 32
        x = np.arange(n)
        d = np.broadcast_to(np.cos(2 * np.pi * 5 * x / n)[:, None, None], (n, n, 4))
        res = nps(d, np.zeros((n, n, 4)))
        peaks = np.argwhere(res.spectrum > 1e-9 * res.spectrum.max())
        freqs = {abs(res.freq_x[i]) for i, _ in peaks}
        assert freqs == {5 / n} and {res.freq_y[j] for _, j in peaks} == {0.0}

    def test_dc_bin(self):
        d = np.full((8, 10, 3), 0.3)
        res = nps(d, np.zeros_like(d), spacing=(0.5, 2.0))
        assert res.spectrum[4, 5] == pytest.approx(0.09 * 8 * 10 * 0.5 * 2.0)

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_parseval(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 12, 10, 6))
        roi = ((2, 11), (1, 9), (0, 4))
        res = nps(a, b, roi=roi, spacing=(0.7, 1.3))
        sl = tuple(slice(lo, hi) for lo, hi in roi)
        assert res.total_power == pytest.approx(np.mean((a - b)[sl] ** 2), rel=1e-6)

    def test_roi_bounds(self):
        with pytest.raises(ValueError):
            nps(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), roi=((0, 5), (0, 4), (0, 4)))

    def test_csv(self):
        d = np.random.default_rng(8).normal(size=(8, 8, 2))
        assert nps(d, np.zeros_like(d)).to_csv().startswith("frequency,nps\n")


class TestHistogram:
    def test_constant_volume(self):
        out = histogram_similarity(np.full((6, 6, 6), 0.4))
        assert out == {0: 0.0, 1: 0.0, 2: 0.0}

    @pytest.mark.parametrize("metric", ["l1", "skl"])
    def test_constant_volume_metrics(self, metric):
        assert max(histogram_similarity(np.ones((5, 5, 5)), metric=metric).values()) <= 1e-12

    def test_shepp_below_threshold(self):
        out = histogram_similarity(shepp(32))
        assert all(v < HISTOGRAM_L1_THRESHOLD for v in out.values())

    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_corrupted_axis_largest(self, axis):
        out = histogram_similarity(corrupt_axis(shepp(32), axis, seed=1))
        assert max(out, key=out.get) == axis
        assert [a for a, v in out.items() if v >= HISTOGRAM_L1_THRESHOLD] == [axis]

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            histogram_similarity(np.ones((3, 3, 3)) * np.arange(3), metric="emd")
