import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tosm3d.mri import MaskSpec, fft2_centered, ifft2_centered, make_mask, undersample
from tosm3d.projector import Geometry, project_array
from tosm3d.score import GaussianScore, GMMScore, ScoreModel, SigmaSchedule, analytic_score, make_schedule
from tosm3d.sirt import SirtConfig, sirt_solve
from tosm3d.tosm import (
    SamplerConfig,
    ablation_config,
    anneal_sample,
    combined_score_3d,
    initial_volume,
    langevin_step,
    pc_sample,
    reconstruct_ct,
    reconstruct_mri,
    step_size,
)
from tosm3d.volume import PhantomSpec, SpecificationError, Volume3D, make_phantom, restack, slice_stack

SCHED = make_schedule(5.0, 0.01, 12)


class ZeroScore(ScoreModel):
    variant = "zero"

    def __init__(self, schedule):
        self.schedule = schedule

    def __call__(self, batch, level):
        return np.zeros(np.shape(batch))


def random_weights(rng):
    w = rng.dirichlet(np.ones(3))
    return tuple(w / w.sum())


class TestCombinedScore:
    @pytest.mark.parametrize("axis", [0, 1, 2])
    def test_degenerate_weights(self, axis):
        m = GMMScore((0.5, 0.5), (0.2, 0.8), (0.2, 0.3), SCHED)
        vol = np.random.default_rng(0).random((6, 6, 6))
        w = [0.0, 0.0, 0.0]
        w[axis] = 1.0
        expected = restack([analytic_score(m, s, 4) for s in slice_stack(vol, axis)], axis)
        assert np.array_equal(combined_score_3d(m, Volume3D(vol), 4, tuple(w)).values, expected.values)

    def test_gaussian_exact_any_weights(self):
        rng = np.random.default_rng(1)
        m = GaussianScore(0.3, 0.6, SCHED)
        vol = rng.normal(size=(8, 8, 8))
        exact = -(vol - 0.3) / (0.36 + SCHED[3] ** 2)
        for _ in range(5):
            out = combined_score_3d(m, vol, 3, random_weights(rng)).values
            assert np.max(np.abs(out - exact)) <= 1e-6

    def test_gmm_loop_oracle(self):
        m = GMMScore((0.3, 0.7), (0.1, 0.6), (0.25, 0.15), SCHED)
        rng = np.random.default_rng(2)
        vol = rng.random((8, 8, 8))
        w = (0.2, 0.5, 0.3)
        expected = np.zeros_like(vol)
        for k in range(8):
            expected[k, :, :] += w[0] * analytic_score(m, vol[k, :, :], 7)
            expected[:, k, :] += w[1] * analytic_score(m, vol[:, k, :], 7)
            expected[:, :, k] += w[2] * analytic_score(m, vol[:, :, k], 7)
        assert np.allclose(combined_score_3d(m, vol, 7, w).values, expected, atol=1e-12)

    def test_non_cubic(self):
        with pytest.raises(SpecificationError):
            combined_score_3d(GaussianScore(0, 1, SCHED), np.zeros((4, 4, 5)), 0)

    @pytest.mark.parametrize("w", [(0.5, 0.5, 0.5), (1.2, -0.2, 0.0), (0.5, 0.5)])
    def test_bad_weights(self, w):
        with pytest.raises(SpecificationError):
            combined_score_3d(GaussianScore(0, 1, SCHED), np.zeros((4, 4, 4)), 0, w)

    def test_complex_channels(self):
        m = GaussianScore(0.0, 1.0, SCHED)
        v = np.random.default_rng(3).normal(size=(4, 4, 4)) * (1 + 2j)
        out = combined_score_3d(m, v, 2).values
        assert np.allclose(out, -v / (1 + SCHED[2] ** 2))


class TestLangevinStep:
    def test_zero_score_no_noise(self):
        v = Volume3D(np.random.default_rng(4).normal(size=(4, 4, 4)))
        out = langevin_step(v, np.zeros((4, 4, 4)), 0.1, np.random.default_rng(0), noise=np.zeros((4, 4, 4)))
        assert np.array_equal(out.values, v.values)

    def test_formula(self):
        rng = np.random.default_rng(5)
        v, s, w = rng.normal(size=(3, 4, 4, 4))
        out = langevin_step(v, s, 0.04, None, noise=w).values
        assert np.allclose(out, v + 0.02 * s + 0.2 * w, atol=1e-15)

    def test_seeded(self):
        v = np.zeros((4, 4, 4))
        a = langevin_step(v, v, 0.1, np.random.default_rng(9)).values
        b = langevin_step(v, v, 0.1, np.random.default_rng(9)).values
        assert np.array_equal(a, b) and a.any()

    def test_errors(self):
        with pytest.raises(SpecificationError):
            langevin_step(np.zeros((4, 4, 4)), np.zeros((4, 4, 3)), 0.1, np.random.default_rng(0))
        with pytest.raises(SpecificationError):
            langevin_step(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), 0.0, np.random.default_rng(0))

    def test_step_rule(self):
        assert step_size(2e-5, 0.1, 0.01) == pytest.approx(2e-3)


def gaussian_run(sampler, seed, n=16, iters=150):
    sched = make_schedule(10.0, 0.01, 12)
    m = GaussianScore(0.0, 1.0, sched)
    cfg = SamplerConfig(iters_per_level=iters, seed=seed, sampler=sampler)
    start = initial_volume((n,) * 3, sched.sigma_max, np.random.default_rng(seed + 1000))
    return anneal_sample(m, start, cfg).values


class TestSamplers:
    def test_langevin_stationarity(self):
        x = gaussian_run("langevin", 0)
        assert abs(x.mean()) <= 3 * x.std() / np.sqrt(x.size)
        assert x.var() == pytest.approx(1.0, rel=0.1)

    def test_pc_one_level_no_corrector(self):
        sched = SigmaSchedule((0.7,))
        m = GaussianScore(0.0, 1.0, sched)
        v0 = np.random.default_rng(6).normal(size=(4, 4, 4))
        out = pc_sample(m, v0, SamplerConfig(iters_per_level=0, seed=3)).values
        z = np.random.default_rng(3).standard_normal(v0.shape)
        expected = v0 + 0.49 * (-v0 / (1 + 0.49)) + 0.7 * z
        assert np.allclose(out, expected, atol=1e-12)

    def test_pc_deterministic(self):
        m = GaussianScore(0.0, 1.0, make_schedule(2.0, 0.1, 3))
        v0 = np.ones((4, 4, 4))
        cfg = SamplerConfig(iters_per_level=3, seed=4, sampler="predictor_corrector")
        assert np.array_equal(pc_sample(m, v0, cfg).values, pc_sample(m, v0, cfg).values)

    def test_pc_agrees_with_langevin(self):
        a = gaussian_run("langevin", 1)
        b = gaussian_run("predictor_corrector", 2)
        se = np.sqrt(2.0 / a.size)
        assert abs(a.mean() - b.mean()) <= 4 * np.sqrt(2.0 / a.size)
        # both samplers are still slightly above unit variance at the end of the schedule
        assert abs(a.var() - b.var()) <= 0.05 + 6 * se


def ct_setup(n=8, views=6):
    g = Geometry.parallel(n, views)
    truth = make_phantom(PhantomSpec("shepp3d", n))
    return g, truth, project_array(truth.values, g)


class TestReconstructCT:
    def test_prior_disabled_is_sirt(self):
        g, _, sino = ct_setup()
        sched = make_schedule(1.0, 0.1, 3)
        cfg = SamplerConfig(iters_per_level=2, dc_weight=1.0, sirt_inner=4, noise_scale=0.0, seed=5)
        out = reconstruct_ct(sino, g, ZeroScore(sched), cfg).volume.values
        init = initial_volume(g.vol_shape, sched.sigma_max, np.random.default_rng(5))
        ref = sirt_solve(sino, g, init=init, cfg=SirtConfig(iterations=3 * 2 * 4)).values
        assert np.max(np.abs(out - ref)) <= 1e-5

    def test_zero_iterations_returns_initial_noise(self):
        g, _, sino = ct_setup()
        sched = make_schedule(1.0, 0.1, 3)
        out = reconstruct_ct(sino, g, ZeroScore(sched), SamplerConfig(iters_per_level=0, seed=6))
        expected = initial_volume(g.vol_shape, 1.0, np.random.default_rng(6))
        assert np.array_equal(out.volume.values, expected) and out.trace == []

    def test_deterministic_and_trace(self):
        g, truth, sino = ct_setup()
        m = GaussianScore(0.2, 0.3, make_schedule(1.0, 0.05, 3))
        cfg = SamplerConfig(iters_per_level=2, sirt_inner=3, seed=7)
        a = reconstruct_ct(sino, g, m, cfg, truth=truth)
        b = reconstruct_ct(sino, g, m, cfg, truth=truth)
        assert np.array_equal(a.volume.values, b.volume.values)
        assert len(a.trace) == 6 and a.trace[-1]["level"] == 2
        assert a.trace_csv().splitlines()[0] == "iteration,level,residual,psnr"
        assert a.trace_csv() == b.trace_csv()

    def test_sinogram_mismatch(self):
        g, _, sino = ct_setup()
        with pytest.raises(SpecificationError):
            reconstruct_ct(sino[:-1], g, ZeroScore(SCHED))

    def test_non_cubic_grid_padded(self):
        g = Geometry("parallel3d", 4, 8, 4, 1.0, 1.0, (8, 8, 4))
        sino = project_array(np.ones((8, 8, 4)), g)
        m = GaussianScore(0.5, 0.5, make_schedule(1.0, 0.05, 2))
        out = reconstruct_ct(sino, g, m, SamplerConfig(iters_per_level=2, sirt_inner=5, seed=1))
        assert out.volume.dims == (8, 8, 4) and np.all(np.isfinite(out.volume.values))

    def test_residual_non_increasing_on_final_level(self):
        g, truth, sino = ct_setup(8, 10)
        m = GaussianScore(0.3, 0.3, make_schedule(1.0, 0.01, 4))
        rec = reconstruct_ct(sino, g, m, SamplerConfig(iters_per_level=10, sirt_inner=20, dc_weight=0.5, seed=2))
        final = [row["residual"] for row in rec.trace if row["level"] == 3]
        assert np.all(np.diff(final) <= 1e-9 * final[0])

    def test_ablation_config(self):
        cfg = ablation_config(SamplerConfig(seed=3))
        assert cfg.weights == (0.0, 0.0, 1.0) and cfg.seed == 3
        assert ablation_config(cfg, 0).weights == (1.0, 0.0, 0.0)

    @pytest.mark.parametrize("kw", [dict(dc_weight=1.5), dict(gamma1=-0.1), dict(sampler="ode"), dict(base_step=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(SpecificationError):
            SamplerConfig(**kw)


class TestReconstructMRI:
    def kdata(self, n=8, spec=MaskSpec("full"), zero=False):
        rng = np.random.default_rng(8)
        truth = rng.random((n, n, n)) * np.exp(1j * rng.uniform(0, 1, (n, n, n)))
        if zero:
            truth = np.zeros_like(truth)
        return truth, undersample(fft2_centered(truth), make_mask(spec, n))

    def test_full_mask_replacement(self):
        truth, data = self.kdata()
        m = GaussianScore(0.0, 1.0, make_schedule(1.0, 0.1, 3))
        cfg = SamplerConfig(iters_per_level=2, dc_weight=1.0, gamma1=1.0, seed=1)
        out = reconstruct_mri(data, m, cfg).volume.values
        assert np.max(np.abs(out - ifft2_centered(data.values))) <= 1e-5
        assert np.max(np.abs(out - truth)) <= 1e-5

    def test_zero_data(self):
        _, data = self.kdata(zero=True)
        cfg = SamplerConfig(iters_per_level=2, dc_weight=1.0, seed=2)
        out = reconstruct_mri(data, GaussianScore(0.0, 1.0, make_schedule(1.0, 0.1, 3)), cfg)
        assert np.max(np.abs(out.volume.values)) <= 1e-12

    def test_deterministic_complex(self):
        truth, data = self.kdata(spec=MaskSpec("uniform1d", 2, 0.25))
        m = GaussianScore(0.3, 0.3, make_schedule(1.0, 0.05, 3))
        cfg = SamplerConfig(iters_per_level=2, seed=3)
        a = reconstruct_mri(data, m, cfg, truth=truth)
        b = reconstruct_mri(data, m, cfg, truth=truth)
        assert np.iscomplexobj(a.volume.values)
        assert np.array_equal(a.volume.values, b.volume.values)
        assert all(row["psnr"] is not None for row in a.trace)

    def test_non_square_slices(self):
        data = undersample(np.zeros((8, 6, 8), complex), np.ones(6, bool))
        with pytest.raises(SpecificationError):
            reconstruct_mri(data, ZeroScore(SCHED), SamplerConfig(iters_per_level=1))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_gaussian_exactness_property(seed):
    rng = np.random.default_rng(seed)
    m = GaussianScore(float(rng.normal()), float(rng.uniform(0.1, 2)), SCHED)
    vol = rng.normal(size=(6, 6, 6))
    level = int(rng.integers(0, 12))
    exact = -(vol - m.mu) / (m.sigma_d**2 + SCHED[level] ** 2)
    assert np.max(np.abs(combined_score_3d(m, vol, level, random_weights(rng)).values - exact)) <= 1e-6
