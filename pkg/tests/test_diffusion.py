import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitforge.diffusion import (
    NOISE_LEVEL_PRESETS,
    GaussianMixture,
    GaussianMixtureDenoiser,
    GuidanceSchedule,
    NoiseLevelDistribution,
    Preconditioner,
    SigmaSchedule,
    analytic_gm_denoiser,
    cfg_combine,
    ddim_sample,
    denoise,
    dsm_loss,
    guidance_schedule,
    make_sigma_schedule,
    precondition,
    sample_sigma,
    score_from_denoiser,
)


class TestPrecondition:
    def test_unit_sigma_at_one(self):
        c_skip, c_out, c_in, c_noise = precondition("edm-unit-sigma", 1.0)
        assert c_skip == pytest.approx(0.5)
        assert c_out == pytest.approx(-1.0 / math.sqrt(2.0))
        assert c_in == pytest.approx(1.0 / math.sqrt(2.0))
        assert c_noise == pytest.approx(0.0)

    def test_c_noise_quarter_log(self):
        _, _, _, c_noise = precondition("edm-unit-sigma", math.exp(4.0))
        assert c_noise == pytest.approx(1.0)

    @given(st.floats(min_value=-3.0, max_value=3.0))
    @settings(max_examples=100, deadline=None)
    def test_skip_out_identity(self, log10_sigma):
        sigma = 10.0**log10_sigma
        c_skip, c_out, _, _ = precondition("edm-unit-sigma", sigma)
        assert abs(c_skip + c_out * c_out - 1.0) < 1e-12

    def test_identity_over_random_sigmas(self):
        rng = np.random.default_rng(0)
        sigmas = 10.0 ** rng.uniform(-3, 3, size=1000)
        for sigma in sigmas:
            c_skip, c_out, _, _ = precondition("edm-unit-sigma", sigma)
            assert abs(c_skip + c_out * c_out - 1.0) < 1e-12

    def test_both_variants_share_c_in(self):
        table = np.linspace(0.01, 100.0, 50)
        for sigma in (0.05, 1.0, 7.3):
            _, _, cin_a, _ = precondition("edm-unit-sigma", sigma)
            _, _, cin_b, _ = precondition("sd21-discrete", sigma, table)
            assert cin_a == pytest.approx(1.0 / math.sqrt(sigma**2 + 1.0))
            assert cin_b == cin_a

    def test_sd21_nearest_index(self):
        table = np.array([0.1, 1.0, 10.0])
        _, c_out, _, c_noise = precondition("sd21-discrete", 1.2, table)
        assert c_noise == 1.0
        assert c_out == pytest.approx(-1.2)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            precondition("edm-unit-sigma", 0.0)
        with pytest.raises(ValueError):
            precondition("edm-unit-sigma", -1.0)

    def test_discrete_requires_table(self):
        with pytest.raises(ValueError):
            precondition("sd21-discrete", 1.0)


class TestDenoise:
    def test_zero_network(self):
        p = Preconditioner("edm-unit-sigma")
        v = np.array([1.0, -2.0, 3.0])
        out = denoise(p, lambda x, cn, c: np.zeros_like(x), v, 1.0)
        np.testing.assert_allclose(out, 0.5 * v)

    def test_identity_network_cancels_at_sigma_one(self):
        p = Preconditioner("edm-unit-sigma")
        v = np.array([0.3, 0.7])
        # c_skip + c_out*c_in = 0.5 - 0.5 = 0 at sigma = 1.
        out = denoise(p, lambda x, cn, c: x, v, 1.0)
        np.testing.assert_allclose(out, np.zeros_like(v), atol=1e-15)

    def test_small_sigma_approaches_x(self):
        p = Preconditioner("edm-unit-sigma")
        v = np.array([1.0, 2.0])
        out = denoise(p, lambda x, cn, c: np.ones_like(x), v, 1e-8)
        np.testing.assert_allclose(out, v, atol=1e-7)

    def test_shape_mismatch_rejected(self):
        p = Preconditioner("edm-unit-sigma")
        with pytest.raises(ValueError):
            denoise(p, lambda x, cn, c: x[:1], np.ones(3), 1.0)


class TestScore:
    def test_fixed_point_gives_zero(self):
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(score_from_denoiser(x, x, 2.0), 0.0)

    def test_offset_recovers_gradient(self):
        x = np.array([0.5, -0.5])
        g = np.array([3.0, -1.0])
        sigma = 0.7
        out = score_from_denoiser(x + sigma**2 * g, x, sigma)
        np.testing.assert_allclose(out, g)

    def test_standard_normal_example(self):
        # N(0,1) data at sigma=1, x=2: posterior mean is 1, score is -1.
        mix = GaussianMixture([1.0], [[0.0]], [1.0])
        d = analytic_gm_denoiser(mix, np.array([2.0]), 1.0)
        np.testing.assert_allclose(d, [1.0])
        np.testing.assert_allclose(score_from_denoiser(d, np.array([2.0]), 1.0), [-1.0])

    def test_sigma_zero_rejected(self):
        with pytest.raises(ValueError):
            score_from_denoiser(np.ones(2), np.ones(2), 0.0)

    def test_matches_finite_difference_log_density(self):
        # Independent oracle: central differences of the closed-form
        # log-marginal of random 2-D mixtures.
        rng = np.random.default_rng(7)
        h = 1e-5
        for _ in range(20):
            k = rng.integers(1, 4)
            mix = GaussianMixture(
                rng.uniform(0.2, 1.0, k),
                rng.normal(0.0, 1.0, (k, 2)),
                rng.uniform(0.05, 0.5, k),
            )
            sigma = float(rng.uniform(0.3, 2.0))
            x = rng.normal(0.0, 1.5, 2)
            d = analytic_gm_denoiser(mix, x, sigma)
            score = score_from_denoiser(d, x, sigma)
            fd = np.zeros(2)
            for a in range(2):
                e = np.zeros(2)
                e[a] = h
                fd[a] = (
                    mix.log_marginal(x + e, sigma) - mix.log_marginal(x - e, sigma)
                ) / (2 * h)
            assert np.linalg.norm(score - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


class TestAnalyticDenoiser:
    def test_deterministic_single_component(self):
        mix = GaussianMixture([1.0], [[2.0, -1.0]], [0.0])
        for x in ([0.0, 0.0], [5.0, 5.0]):
            np.testing.assert_allclose(
                analytic_gm_denoiser(mix, np.array(x), 0.8), [2.0, -1.0]
            )

    def test_sigma_zero_returns_x(self):
        mix = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.1, 0.1])
        x = np.array([0.37])
        np.testing.assert_array_equal(analytic_gm_denoiser(mix, x, 0.0), x)

    def test_symmetry_at_midpoint(self):
        mix = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.0, 0.0])
        np.testing.assert_allclose(
            analytic_gm_denoiser(mix, np.array([0.0]), 1.0), [0.0], atol=1e-15
        )

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(3)
        mix = GaussianMixture(
            rng.uniform(0.1, 1.0, 3), rng.normal(size=(3, 2)), rng.uniform(0, 0.3, 3)
        )
        xs = rng.normal(size=(8, 2))
        sig = rng.uniform(0.2, 2.0, 8)
        batched = analytic_gm_denoiser(mix, xs, sig)
        for i in range(8):
            np.testing.assert_allclose(
                batched[i], analytic_gm_denoiser(mix, xs[i], sig[i])
            )

    def test_weights_normalized(self):
        mix = GaussianMixture([2.0, 2.0], [[0.0], [1.0]], [0.0, 0.0])
        assert abs(mix.weights.sum() - 1.0) < 1e-12

    def test_empty_mixture_rejected(self):
        with pytest.raises(ValueError):
            GaussianMixture([], np.zeros((0, 1)), [])


class TestDsmLoss:
    def test_perfect_denoiser_on_point_mass(self):
        mix = GaussianMixture([1.0], [[1.5]], [0.0])
        rng = np.random.default_rng(0)
        loss = dsm_loss(
            lambda x, s, c=None: analytic_gm_denoiser(mix, x, s),
            mix,
            NoiseLevelDistribution(-1.2, 1.0),
            rng,
            2000,
        )
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_posterior_mean_beats_perturbed(self):
        # Optimality of the posterior mean: a fixed additive offset must
        # strictly increase the paired MC estimate.
        mix = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.05, 0.05])
        dist = NoiseLevelDistribution(-0.5, 0.8)
        base = lambda x, s, c=None: analytic_gm_denoiser(mix, x, s)
        shifted = lambda x, s, c=None: analytic_gm_denoiser(mix, x, s) + 0.1
        diffs = []
        for seed in range(5):
            l0 = dsm_loss(base, mix, dist, np.random.default_rng(seed), 10_000)
            l1 = dsm_loss(shifted, mix, dist, np.random.default_rng(seed), 10_000)
            assert l1 > l0
            diffs.append(l1 - l0)
        diffs = np.asarray(diffs)
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert diffs.mean() > 2.0 * se

    def test_zero_denoiser_on_standard_normal(self):
        # E||x0||^2 = 1 for scalar N(0,1) data at fixed sigma, lambda = 1.
        mix = GaussianMixture([1.0], [[0.0]], [1.0])
        rng = np.random.default_rng(11)
        loss = dsm_loss(
            lambda x, s, c=None: np.zeros_like(x),
            mix,
            NoiseLevelDistribution(0.0, 0.0),
            rng,
            10_000,
            weight=lambda s: np.ones_like(np.asarray(s)),
        )
        assert loss == pytest.approx(1.0, abs=0.06)


class TestSampleSigma:
    def test_degenerate_distribution(self):
        rng = np.random.default_rng(0)
        out = sample_sigma(NoiseLevelDistribution(0.0, 0.0), rng, 100)
        np.testing.assert_array_equal(out, 1.0)

    def test_lognormal_median(self):
        rng = np.random.default_rng(1)
        out = sample_sigma(NOISE_LEVEL_PRESETS["image-finetune"], rng, 100_000)
        med = np.median(out)
        assert abs(med - math.exp(-1.2)) / math.exp(-1.2) < 0.02

    def test_always_positive(self):
        rng = np.random.default_rng(2)
        out = sample_sigma(NoiseLevelDistribution(1.0, 1.6), rng, 10_000)
        assert np.all(out > 0)

    def test_presets(self):
        assert NOISE_LEVEL_PRESETS["image-finetune"] == NoiseLevelDistribution(-1.2, 1.0)
        assert NOISE_LEVEL_PRESETS["video-pretrain-hires"].p_mean == 0.0
        assert NOISE_LEVEL_PRESETS["text-to-video-hq"] == NoiseLevelDistribution(0.5, 1.4)
        assert NOISE_LEVEL_PRESETS["image-to-video-base"] == NoiseLevelDistribution(0.7, 1.6)
        assert NOISE_LEVEL_PRESETS["image-to-video-hq"] == NoiseLevelDistribution(1.0, 1.6)


class TestSigmaSchedule:
    def test_two_steps(self):
        sched = make_sigma_schedule(3.0, 1.0, 2, rho=7.0)
        np.testing.assert_allclose(sched.sigmas, [3.0, 1.0, 0.0])

    def test_linear_when_rho_one(self):
        sched = make_sigma_schedule(3.0, 1.0, 3, rho=1.0)
        np.testing.assert_allclose(sched.sigmas, [3.0, 2.0, 1.0, 0.0])

    def test_strictly_decreasing(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            hi = float(rng.uniform(10, 100))
            lo = float(rng.uniform(1e-3, 0.5))
            n = int(rng.integers(1, 80))
            sched = make_sigma_schedule(hi, lo, n, rho=float(rng.uniform(0.5, 9)))
            assert np.all(np.diff(sched.sigmas) < 0)
            assert sched.sigmas[-1] == 0.0

    def test_invalid_ordering_rejected(self):
        with pytest.raises(ValueError):
            make_sigma_schedule(1.0, 2.0, 10)
        with pytest.raises(ValueError):
            SigmaSchedule(np.array([1.0, 2.0, 0.0]))
        with pytest.raises(ValueError):
            SigmaSchedule(np.array([2.0, 1.0, 0.5]))


class TestDdimSample:
    def test_single_step_zero_denoiser(self):
        sched = SigmaSchedule(np.array([5.0, 0.0]))
        out = ddim_sample(
            lambda x, s, c=None: np.zeros_like(x),
            sched,
            x_init=np.array([3.7]),
        )
        np.testing.assert_allclose(out, [0.0], atol=1e-15)

    def test_single_gaussian_target_statistics(self):
        # Sampler consistency: the probability-flow ODE with the analytic
        # denoiser must transport N(0, sigma_max^2) onto the data Gaussian.
        # The noise range is sized to the toy data scale; a first-order
        # Euler chain at 50 steps needs sigma_max commensurate with the
        # data std to stay within the stated tolerances.
        mu = np.array([1.2, -0.7])
        var = 0.25
        mix = GaussianMixture([1.0], [mu], [var])
        sched = make_sigma_schedule(20.0, 0.02, 50, rho=7.0)
        rng = np.random.default_rng(123)
        out = ddim_sample(
            lambda x, s, c=None: analytic_gm_denoiser(mix, x, s),
            sched,
            rng=rng,
            n_samples=10_000,
            dim=2,
        )
        mean = out.mean(axis=0)
        std = out.std(axis=0)
        for a in range(2):
            assert abs(mean[a] - mu[a]) <= 0.03 * abs(mu[a]) + 0.02
            assert abs(std[a] - math.sqrt(var)) <= 0.05 * math.sqrt(var)

    def test_unit_guidance_bitwise_equals_conditional(self):
        mix_c = GaussianMixture([1.0], [[1.0]], [0.3])
        mix_u = GaussianMixture([1.0], [[-9.0]], [2.0])
        den = GaussianMixtureDenoiser({"obj": mix_c, None: mix_u})
        sched = make_sigma_schedule(10.0, 0.01, 12)
        x0 = np.array([0.5])
        a = ddim_sample(den, sched, cond="obj", guidance=1.0, x_init=x0)
        b = ddim_sample(den, sched, cond="obj", x_init=x0)
        assert a.tobytes() == b.tobytes()

    def test_pure_function_bitwise(self):
        mix = GaussianMixture([0.5, 0.5], [[1.0], [-1.0]], [0.1, 0.1])
        den = GaussianMixtureDenoiser({None: mix})
        sched = make_sigma_schedule(30.0, 0.01, 25)
        x0 = np.random.default_rng(5).standard_normal(4) * 30.0
        a = ddim_sample(den, sched, x_init=x0, guidance=1.0)
        b = ddim_sample(den, sched, x_init=x0, guidance=1.0)
        assert a.tobytes() == b.tobytes()

    def test_per_step_guidance_length_checked(self):
        mix = GaussianMixture([1.0], [[0.0]], [1.0])
        den = GaussianMixtureDenoiser({None: mix})
        sched = make_sigma_schedule(10.0, 0.01, 5)
        with pytest.raises(ValueError):
            ddim_sample(den, sched, x_init=np.zeros(1), guidance=[1.0, 2.0])


class TestCfgCombine:
    def test_w_one_is_conditional(self):
        dc = np.array([1.0, 2.0, -0.5])
        du = np.array([9.0, -9.0, 9.0])
        out = cfg_combine(dc, du, 1.0)
        assert out.tobytes() == dc.tobytes()

    def test_w_zero_is_unconditional(self):
        dc = np.array([1.0])
        du = np.array([4.0])
        np.testing.assert_array_equal(cfg_combine(dc, du, 0.0), du)

    def test_extrapolation(self):
        assert cfg_combine(np.array([1.0]), np.array([0.0]), 2.0)[0] == 2.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cfg_combine(np.zeros(2), np.zeros(3), 1.5)


class TestGuidanceSchedule:
    def test_triangular_endpoints_and_peak(self):
        assert guidance_schedule("triangular", 21, 1.0, 2.5, 0) == 1.0
        assert guidance_schedule("triangular", 20, 1.0, 2.5, 10) == 2.5

    def test_linear_endpoints(self):
        assert guidance_schedule("linear", 2, 1.0, 4.0, 0) == 1.0
        assert guidance_schedule("linear", 2, 1.0, 4.0, 1) == 4.0

    def test_constant(self):
        assert guidance_schedule("constant", 7, 1.0, 3.5, 3) == 3.5

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            guidance_schedule("triangular", 10, 1.0, 2.5, 10)
        with pytest.raises(ValueError):
            guidance_schedule("triangular", 10, 1.0, 2.5, -1)

    @given(st.integers(min_value=2, max_value=60))
    @settings(max_examples=50, deadline=None)
    def test_triangular_symmetry_and_bounds(self, k):
        sched = GuidanceSchedule("triangular", 1.0, 2.5, k)
        vals = sched.values()
        assert vals[0] == 1.0
        assert np.all(vals >= 1.0) and np.all(vals <= 2.5)
        # s(i) == s(k - i) for indices where both sides are valid frames.
        for i in range(1, k):
            assert sched.at(i) == pytest.approx(sched.at(k - i), abs=1e-12)
        # The maximum sits at the frame(s) nearest u = 0.5.
        nearest = int(round(k / 2.0))
        nearest = min(nearest, k - 1)
        assert vals.max() == pytest.approx(sched.at(nearest))
