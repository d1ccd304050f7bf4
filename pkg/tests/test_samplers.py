import numpy as np
import pytest

from ggdln import samplers
from ggdln.datasets import Dataset
from ggdln.errors import DimensionMismatch, Diverged, TooFewSamples
from ggdln.gatings import random_halfspace_family
from ggdln.network import Architecture, Params, init_params
from ggdln.samplers import (
    TrainConfig,
    ensemble_predictor_stats,
    estimate_readout_covariance,
    gd_train,
    langevin_readout_snapshots,
    langevin_sample,
)


def always_on(n0, m=1):
    return random_halfspace_family(n0, m, -1e9, seed=0)


def toy_dataset(n0, p, p_t, seed, y_scale=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((p, n0))
    xt = rng.standard_normal((p_t, n0))
    return Dataset(x, y_scale * rng.standard_normal(p), xt, np.zeros(p_t))


class TestTrainConfig:
    def test_burn_in_bound(self):
        with pytest.raises(DimensionMismatch):
            TrainConfig(max_steps=100, burn_in=100).check_sampling()

    def test_defaults_valid(self):
        cfg = TrainConfig()
        assert cfg.stop_train_mse == 1e-3


class TestGdTrain:
    def test_zero_targets_converges(self):
        n0, p = 6, 12
        ds = toy_dataset(n0, p, 3, seed=1, y_scale=0.0)
        arch = Architecture(1, 30, 3, n0, prior_scale=1.0)
        fam = random_halfspace_family(n0, 3, 0.0, seed=2)
        runs = gd_train(ds, fam, arch, TrainConfig(n_seeds=3, max_steps=2000), 3)
        assert all(r.converged for r in runs)
        assert all(r.final_mse < 1e-3 for r in runs)

    def test_below_capacity_interpolates(self):
        n0, m, p = 10, 4, 20  # capacity 40 > 20
        ds = toy_dataset(n0, p, 3, seed=4)
        arch = Architecture(1, 80, m, n0, prior_scale=1.0)
        fam = random_halfspace_family(n0, m, 0.0, seed=5)
        runs = gd_train(ds, fam, arch, TrainConfig(n_seeds=4, max_steps=6000), 6)
        assert all(r.converged for r in runs)

    def test_zero_learning_rate_records_no_convergence(self):
        ds = toy_dataset(5, 8, 2, seed=7)
        arch = Architecture(1, 20, 2, 5, prior_scale=1.0)
        fam = random_halfspace_family(5, 2, 0.0, seed=8)
        p0 = init_params(arch, 0)
        with pytest.warns(UserWarning):
            runs = gd_train(ds, fam, arch,
                            TrainConfig(learning_rate=0.0, n_seeds=2, max_steps=50), 9)
        assert all(not r.converged for r in runs)

    def test_determinism(self):
        ds = toy_dataset(6, 10, 2, seed=10)
        arch = Architecture(1, 25, 2, 6, prior_scale=0.8)
        fam = random_halfspace_family(6, 2, 0.0, seed=11)
        cfg = TrainConfig(n_seeds=2, max_steps=500)
        a = gd_train(ds, fam, arch, cfg, 12)
        b = gd_train(ds, fam, arch, cfg, 12)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.params.w1, rb.params.w1)
            assert ra.final_mse == rb.final_mse

    def test_generic_depth_two_descends(self):
        ds = toy_dataset(5, 6, 2, seed=13, y_scale=0.3)
        arch = Architecture(2, 25, 2, 5, prior_scale=0.7)
        fam = random_halfspace_family(5, 2, 0.0, seed=14)
        runs = gd_train(ds, fam, arch, TrainConfig(n_seeds=2, max_steps=4000), 15)
        assert all(r.final_mse < 0.09 for r in runs)  # var(y) ~ 0.09


class TestGenericGradients:
    @pytest.mark.parametrize("depth", [1, 2])
    def test_against_finite_differences(self, depth):
        n0, n, m, p = 4, 6, 2, 5
        arch = Architecture(depth, n, m, n0, prior_scale=0.9)
        fam = random_halfspace_family(n0, m, 0.0, seed=16)
        params = init_params(arch, 17)
        rng = np.random.default_rng(18)
        x = rng.standard_normal((p, n0))
        y = rng.standard_normal(p)
        loss, d_w1, d_hidden, d_a = samplers._loss_and_grads_generic(
            arch, params, fam, x, y, "width")
        h = 1e-6

        def loss_of(pp):
            return samplers._loss_and_grads_generic(arch, pp, fam, x, y, "width")[0]

        for arr, grad in [(params.w1, d_w1), (params.readout, d_a)] + list(
                zip(params.hidden, d_hidden)):
            flat_idx = [(0,) * arr.ndim,
                        tuple(np.unravel_index(arr.size - 1, arr.shape))]
            for idx in flat_idx:
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_of(params)
                arr[idx] = orig - h
                dn = loss_of(params)
                arr[idx] = orig
                assert (up - dn) / (2 * h) == pytest.approx(grad[idx], rel=1e-4, abs=1e-10)


class TestLangevin:
    def test_noise_vanishes_at_zero_temperature(self):
        cfg = TrainConfig(learning_rate=0.05, temperature=0.0, max_steps=40,
                          burn_in=10, thinning=5, n_seeds=1)
        assert np.sqrt(2 * cfg.learning_rate * cfg.temperature) == 0.0

    def test_prior_only_second_moments(self):
        # With no data the stationary distribution is the Gaussian prior;
        # check second moments at 3 standard errors using chain-end samples.
        n0, n, m, sigma = 4, 10, 2, 1.2
        arch = Architecture(1, n, m, n0, prior_scale=sigma)
        fam = random_halfspace_family(n0, m, 0.0, seed=19)
        ds = Dataset(np.zeros((0, n0)), np.zeros(0), np.zeros((1, n0)), np.zeros(1))
        cfg = TrainConfig(learning_rate=5e-3, temperature=1.0, max_steps=2000,
                          burn_in=1500, thinning=500)
        snaps = langevin_readout_snapshots(ds, fam, arch, cfg, 20, n_chains=150)
        vals = np.concatenate([s.readout.ravel() for s in snaps])
        var_hat = vals.var()
        se = sigma ** 2 * np.sqrt(2.0 / (len(vals) - 1))
        assert abs(var_hat - sigma ** 2) <= 3 * se + 0.01 * sigma ** 2

    def test_two_parameter_toy_matches_quadrature(self):
        # N = N0 = M = 1 with one training point: the posterior over (w, a)
        # is exp(-(a w x - y)^2 / (2T) - (a^2 + w^2) / (2 s^2)), normalized
        # on a quadrature grid. Sampled moments must agree within 5%.
        sigma, temp, xval, yval = 1.0, 0.25, 1.0, 0.8
        arch = Architecture(1, 1, 1, 1, prior_scale=sigma)
        fam = always_on(1)
        ds = Dataset(np.array([[xval]]), np.array([yval]),
                     np.array([[0.5]]), np.zeros(1))
        cfg = TrainConfig(learning_rate=4e-3, temperature=temp, max_steps=30000,
                          burn_in=5000, thinning=25)
        snaps = langevin_readout_snapshots(ds, fam, arch, cfg, 21, n_chains=40)
        a_samp = np.array([s.readout[0, 0] for s in snaps])
        w_samp = np.array([s.w1[0, 0] for s in snaps])
        f_samp = a_samp * w_samp * 0.5  # predictor at x_t = 0.5

        grid = np.linspace(-6, 6, 801)
        aa, ww = np.meshgrid(grid, grid, indexing="ij")
        log_post = (-(aa * ww * xval - yval) ** 2 / (2 * temp)
                    - (aa ** 2 + ww ** 2) / (2 * sigma ** 2))
        post = np.exp(log_post - log_post.max())
        post /= post.sum()
        f_grid = aa * ww * 0.5
        mean_exact = float((post * f_grid).sum())
        var_exact = float((post * f_grid ** 2).sum()) - mean_exact ** 2
        a2_exact = float((post * aa ** 2).sum())

        assert f_samp.mean() == pytest.approx(mean_exact, abs=0.05 * max(abs(mean_exact), var_exact ** 0.5))
        assert f_samp.var() == pytest.approx(var_exact, rel=0.05)
        assert (a_samp ** 2).mean() == pytest.approx(a2_exact, rel=0.05)

    def test_divergence_guard(self):
        ds = toy_dataset(4, 6, 2, seed=22, y_scale=3.0)
        arch = Architecture(1, 10, 2, 4, prior_scale=1.0)
        fam = random_halfspace_family(4, 2, 0.0, seed=23)
        cfg = TrainConfig(learning_rate=50.0, temperature=1e-2, max_steps=5000,
                          burn_in=10, thinning=1)
        with pytest.raises(Diverged):
            list(langevin_sample(ds, fam, arch, cfg, 24))

    def test_stream_shape_and_count(self):
        ds = toy_dataset(4, 5, 2, seed=25)
        arch = Architecture(1, 8, 2, 4, prior_scale=1.0)
        fam = random_halfspace_family(4, 2, 0.0, seed=26)
        cfg = TrainConfig(learning_rate=1e-3, temperature=1e-2, max_steps=300,
                          burn_in=100, thinning=50)
        snaps = list(langevin_sample(ds, fam, arch, cfg, 27))
        assert len(snaps) == 4  # steps 150, 200, 250, 300
        assert snaps[0].readout.shape == (2, 8)


class TestEstimators:
    def test_constant_snapshots_rank_one(self):
        n = 16
        p = Params(np.zeros((n, 3)), [], np.vstack([np.ones(n), np.zeros(n)]))
        u, se = estimate_readout_covariance([p] * 30)
        assert u[0, 0] == pytest.approx(1.0)
        assert u[1, 1] == 0.0 and u[0, 1] == 0.0
        np.testing.assert_array_equal(se, 0.0)

    def test_prior_samples_recover_sigma2(self):
        arch = Architecture(1, 60, 3, 5, prior_scale=0.9)
        ps = [init_params(arch, s) for s in range(400)]
        u, se = estimate_readout_covariance(ps)
        target = 0.81 * np.eye(3)
        assert np.abs(u - target).max() <= 4 * se.max() + 0.02

    def test_too_few(self):
        arch = Architecture(1, 4, 2, 3, prior_scale=1.0)
        with pytest.raises(TooFewSamples):
            estimate_readout_covariance([init_params(arch, 0)] * 10)

    def test_ensemble_stats_basics(self):
        n0 = 4
        arch = Architecture(1, 6, 2, n0, prior_scale=1.0)
        fam = always_on(n0, 2)
        xt = np.random.default_rng(28).standard_normal((5, n0))
        p1 = init_params(arch, 1)
        stats_same = ensemble_predictor_stats([p1, p1], fam, arch, xt)
        np.testing.assert_allclose(stats_same.variance, 0.0, atol=1e-20)
        p2 = init_params(arch, 2)
        a = ensemble_predictor_stats([p1, p2], fam, arch, xt)
        b = ensemble_predictor_stats([p2, p1], fam, arch, xt)
        np.testing.assert_allclose(a.mean, b.mean)
        np.testing.assert_allclose(a.variance, b.variance)
        with pytest.raises(TooFewSamples):
            ensemble_predictor_stats([p1], fam, arch, xt)

    def test_two_member_hand_case(self):
        # Outputs 0 and 2 at a point: mean 1, unbiased variance 2.
        n0 = 3
        arch = Architecture(1, 2, 1, n0, prior_scale=1.0)
        fam = always_on(n0)
        zero = Params(np.zeros((2, n0)), [], np.zeros((1, 2)))
        w1 = np.zeros((2, n0))
        w1[0, 0] = 1.0
        a = np.zeros((1, 2))
        a[0, 0] = 2.0 * np.sqrt(2.0 * n0)  # makes f = 2 x_0
        two = Params(w1, [], a)
        xt = np.array([[1.0, 0.0, 0.0]])
        stats = ensemble_predictor_stats([zero, two], fam, arch, xt)
        assert stats.mean[0] == pytest.approx(1.0)
        assert stats.variance[0] == pytest.approx(2.0)
