import numpy as np
import pytest

from ggdln import renorm
from ggdln.datasets import Dataset
from ggdln.errors import BudgetExceeded, DimensionMismatch
from ggdln.gatings import random_halfspace_family, evaluate
from ggdln.gp import PredictorStats, gp_kernel, gp_predict, input_kernel
from ggdln.numerics import numerical_rank, psd_sqrt
from ggdln.renorm import (
    OrderParameterSet,
    SolveDiagnostics,
    SolverConfig,
    hamiltonian_l1,
    predict,
    renorm_kernel,
    solve_order_params_deep,
    solve_order_params_l1,
)


def make_instance(n0, p, m, sigma, seed, require_pd=True):
    """Gaussian data + halfspace gates with a full-rank training kernel.

    Points with every gate off are discarded (they contribute exact zero
    kernel rows), and the remaining draw is redrawn until numerically full
    rank.
    """
    rng = np.random.default_rng(seed)
    fam = random_halfspace_family(n0, m, 0.0, seed=seed)
    for _ in range(50):
        x = rng.standard_normal((4 * p, n0))
        g = evaluate(fam, x)
        if require_pd:
            x = x[g.sum(axis=0) > 0][:p]
        else:
            x = x[:p]
        if x.shape[0] < p:
            continue
        g = evaluate(fam, x)
        k0 = input_kernel(x, x, sigma)
        ktilde = (g.T @ (sigma ** 2 * np.eye(m)) @ g) / m * k0
        if not require_pd or numerical_rank(ktilde) == p:
            break
    else:
        raise AssertionError("no full-rank draw found")
    y = rng.standard_normal(p)
    return fam, x, g, k0, y


def manual_ops(u_list, sigma, n_width):
    diag = SolveDiagnostics(0, 0.0, 0.0, 0.0, True, "manual")
    duals = [sigma ** 2 * np.linalg.inv(u) - np.eye(u.shape[0]) for u in u_list]
    return OrderParameterSet(len(u_list), sigma, n_width, list(u_list), duals, diag)


class TestHamiltonian:
    def test_scalar_reduction(self):
        # M=1 with scalar u: H = u^-1 y' Kbar^-1 y / 2 + P/2 log u
        #   + log det Kbar / 2 - N/2 log u + N u / (2 sigma^2),
        # where Kbar is the gate-masked input kernel.
        n0, p, n, sigma, u = 9, 6, 37, 1.2, 0.7
        fam, x, g, k0, y = make_instance(n0, p, 1, sigma, seed=42)
        kbar = (g.T * g) * k0  # outer product of the single gate row
        got = hamiltonian_l1(np.array([[u]]), g, k0, y, n, sigma)
        sign, logdet_kbar = np.linalg.slogdet(kbar)
        expected = (
            0.5 / u * y @ np.linalg.solve(kbar, y)
            + 0.5 * (p * np.log(u) + logdet_kbar)
            - 0.5 * n * np.log(u)
            + 0.5 * n * u / sigma ** 2
        )
        assert got == pytest.approx(expected, rel=1e-9)

    def test_penalty_stationary_at_prior(self):
        # The width-proportional terms are stationary exactly at U = sigma^2 I,
        # so the gradient there must not scale with N.
        sigma = 0.9
        fam, x, g, k0, y = make_instance(5, 12, 3, sigma, seed=7)
        u = sigma ** 2 * np.eye(3)
        g_small = renorm._deep_energy_and_grads([u], g, k0, y, 10, sigma, 0.0)[1][0]
        g_large = renorm._deep_energy_and_grads([u], g, k0, y, 10 ** 9, sigma, 0.0)[1][0]
        assert np.linalg.norm(g_large - g_small) < 1e-6

    def test_finite_difference_gradient(self):
        # Central-difference oracle on the Cholesky parameterization, the
        # same gradient the minimizer consumes.
        sigma, n = 1.1, 50
        fam, x, g, k0, y = make_instance(6, 14, 3, sigma, seed=11)
        rng = np.random.default_rng(12)
        c = np.tril(0.3 * rng.standard_normal((3, 3))) + np.diag([1.0, 0.8, 1.3])

        def h_of_c(cmat):
            return hamiltonian_l1(cmat @ cmat.T, g, k0, y, n, sigma)

        _, grads = renorm._deep_energy_and_grads([c @ c.T], g, k0, y, n, sigma, 0.0)
        grad_c = 2.0 * grads[0] @ c
        h = 1e-6
        for i in range(3):
            for j in range(i + 1):
                cp, cm = c.copy(), c.copy()
                cp[i, j] += h
                cm[i, j] -= h
                fd = (h_of_c(cp) - h_of_c(cm)) / (2.0 * h)
                assert fd == pytest.approx(grad_c[i, j], rel=1e-5, abs=1e-8)


class TestSolveL1:
    def test_gp_limit(self):
        sigma = 1.3
        fam, x, g, k0, y = make_instance(10, 20, 4, sigma, seed=1)
        ops = solve_order_params_l1(g, k0, y, 10 ** 6, sigma)
        target = sigma ** 2 * np.eye(4)
        rel = np.linalg.norm(ops.u[0] - target) / np.linalg.norm(target)
        assert rel <= 1e-3
        assert ops.diagnostics.converged

    def test_scalar_closed_form_oracle(self):
        # For M=1 the sandwich equation reduces to a quadratic in u:
        #   u^2 - sigma^2 (1 - r/N) u - sigma^2 q / N = 0,
        # with r = rank of the gate-masked kernel and q = y' D^+ y. A
        # bisection on the one-dimensional map must agree as well.
        # Deliberately above the M=1 capacity (rank deficient) to exercise
        # the pseudo-inverse route of the map.
        n0, p, n, sigma = 8, 12, 33, 0.9
        fam, x, g, k0, y = make_instance(n0, p, 1, sigma, seed=3, require_pd=False)
        d = (g.T * g) * k0
        r = numerical_rank(d)
        q = float(y @ np.linalg.lstsq(d, y, rcond=None)[0])
        a = sigma ** 2 * (1.0 - r / n)
        u_closed = 0.5 * (a + np.sqrt(a * a + 4.0 * sigma ** 2 * q / n))

        def scalar_map(u):
            return renorm._sandwich_map(
                np.array([[u]]), g, k0, y, n, sigma, "sigma2_identity", 0.0)[0, 0]

        lo, hi = 1e-6, 50.0
        f = lambda u: u - scalar_map(u)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if f(lo) * f(mid) <= 0:
                hi = mid
            else:
                lo = mid
        u_bisect = 0.5 * (lo + hi)
        ops = solve_order_params_l1(g, k0, y, n, sigma, SolverConfig(tol=1e-13))
        assert ops.u[0][0, 0] == pytest.approx(u_closed, abs=1e-9)
        assert ops.u[0][0, 0] == pytest.approx(u_bisect, abs=1e-9)

    @pytest.mark.parametrize("seed,p,m,sigma", [
        (21, 30, 2, 1.0), (22, 60, 4, 0.7), (23, 100, 8, 1.0),
        (24, 45, 3, 1.4), (25, 80, 6, 0.9), (26, 25, 2, 1.2),
        (27, 70, 5, 0.8), (28, 90, 7, 1.1), (29, 50, 4, 1.0), (30, 40, 3, 0.6),
    ])
    def test_fixed_point_matches_minimizer(self, seed, p, m, sigma):
        n0 = max(6, int(np.ceil(1.5 * p / m)))  # keep below capacity
        fam, x, g, k0, y = make_instance(n0, p, m, sigma, seed=seed)
        n = max(20, p // 2)
        cfg = SolverConfig(mode="both", tol=1e-12, grad_tol=1e-8)
        ops = solve_order_params_l1(g, k0, y, n, sigma, cfg)
        assert ops.diagnostics.extra["cross_check_rel_frobenius"] <= 1e-6

    def test_iterates_stay_symmetric_psd(self):
        fam, x, g, k0, y = make_instance(15, 40, 4, 1.0, seed=31)
        ops = solve_order_params_l1(g, k0, y, 30, 1.0)
        u = ops.u[0]
        np.testing.assert_allclose(u, u.T)
        assert np.linalg.eigvalsh(u)[0] >= 0.0

    def test_duals_identity(self):
        sigma = 1.1
        fam, x, g, k0, y = make_instance(15, 30, 3, sigma, seed=32)
        ops = solve_order_params_l1(g, k0, y, 25, sigma)
        lhs = ops.u[0]
        rhs = sigma ** 2 * np.linalg.inv(np.eye(3) + ops.duals[0])
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * np.linalg.norm(lhs)

    def test_printed_leading_term_mode(self):
        # The strict-as-printed map is retained behind a flag; at sigma = 1
        # it coincides with the energy-consistent default.
        fam, x, g, k0, y = make_instance(15, 30, 3, 1.0, seed=33)
        a = solve_order_params_l1(g, k0, y, 40, 1.0,
                                  SolverConfig(leading_term="identity", tol=1e-11))
        b = solve_order_params_l1(g, k0, y, 40, 1.0, SolverConfig(tol=1e-11))
        assert np.linalg.norm(a.u[0] - b.u[0]) <= 1e-8 * np.linalg.norm(b.u[0])

    def test_json_export(self, tmp_path):
        fam, x, g, k0, y = make_instance(10, 15, 2, 1.0, seed=34)
        ops = solve_order_params_l1(g, k0, y, 20, 1.0)
        path = tmp_path / "ops.json"
        ops.save(path)
        import json
        doc = json.loads(path.read_text())
        assert doc["depth"] == 1
        np.testing.assert_allclose(np.array(doc["u"][0]), ops.u[0])
        assert doc["diagnostics"]["converged"] is True


class TestSolveDeep:
    def test_depth_one_matches_l1_fixed_point(self):
        fam, x, g, k0, y = make_instance(14, 20, 2, 1.0, seed=41)
        fp = solve_order_params_l1(g, k0, y, 100, 1.0, SolverConfig(tol=1e-13))
        deep = solve_order_params_deep(1, g, k0, y, 100, 1.0,
                                       SolverConfig(grad_tol=1e-10))
        rel = np.linalg.norm(fp.u[0] - deep.u[0]) / np.linalg.norm(fp.u[0])
        assert rel <= 1e-8

    def test_prior_point_reproduces_gp_kernel(self):
        sigma = 1.2
        fam = random_halfspace_family(6, 2, 0.0, seed=42)
        rng = np.random.default_rng(43)
        x = rng.standard_normal((10, 6))
        xt = rng.standard_normal((4, 6))
        for depth in (1, 2, 3):
            u_list = [sigma ** 2 * np.eye(2 ** (l + 1)) for l in range(depth)]
            ops = manual_ops(u_list, sigma, 100)
            bundle = renorm_kernel(ops, fam, x, xt, sigma)
            ref = gp_kernel(fam, x, xt, sigma, depth)
            np.testing.assert_allclose(bundle.k_train, ref.k_train, atol=1e-10)
            np.testing.assert_allclose(bundle.k_test, ref.k_test, atol=1e-10)
            np.testing.assert_allclose(bundle.k_diag_test, ref.k_diag_test, atol=1e-10)

    def test_depth_two_stationary(self):
        sigma, n = 1.0, 40
        fam, x, g, k0, y = make_instance(8, 16, 2, sigma, seed=44)
        ops = solve_order_params_deep(2, g, k0, y, n, sigma,
                                      SolverConfig(grad_tol=1e-9))
        u1, u2 = ops.u
        h = 1e-5
        base, _ = renorm._deep_energy_and_grads([u1, u2], g, k0, y, n, sigma, 0.0)
        scale = max(1.0, abs(base))
        for mat, idx in ((u1, 0), (u2, 1)):
            rng = np.random.default_rng(45 + idx)
            d = rng.standard_normal(mat.shape)
            d = 0.5 * (d + d.T)
            d /= np.linalg.norm(d)
            mats_p = [u1.copy(), u2.copy()]
            mats_m = [u1.copy(), u2.copy()]
            mats_p[idx] = mats_p[idx] + h * d
            mats_m[idx] = mats_m[idx] - h * d
            ep, _ = renorm._deep_energy_and_grads(mats_p, g, k0, y, n, sigma, 0.0)
            em, _ = renorm._deep_energy_and_grads(mats_m, g, k0, y, n, sigma, 0.0)
            assert abs(ep - em) / (2 * h) <= 1e-4 * scale

    def test_size_guard(self):
        fam, x, g, k0, y = make_instance(6, 10, 5, 1.0, seed=46, require_pd=False)
        with pytest.raises(BudgetExceeded):
            solve_order_params_deep(4, g, k0, y, 30, 1.0)


class TestRenormKernelAndPredict:
    def test_scalar_renormalization_scales_kernel(self):
        fam = random_halfspace_family(5, 1, -1e9, seed=51)
        rng = np.random.default_rng(52)
        x = rng.standard_normal((8, 5))
        u = np.array([[0.37]])
        ops = manual_ops([u], 1.0, 50)
        bundle = renorm_kernel(ops, fam, x, x[:3], 1.0)
        gp_b = gp_kernel(fam, x, x[:3], 1.0, 1)
        np.testing.assert_allclose(bundle.k_train, 0.37 * gp_b.k_train, atol=1e-12)

    def test_bilinear_in_u(self):
        fam, x, g, k0, y = make_instance(6, 10, 3, 1.0, seed=53)
        u = np.eye(3) + 0.2 * np.ones((3, 3))
        a = renorm_kernel(manual_ops([u], 1.0, 10), fam, x, x[:2], 1.0)
        b = renorm_kernel(manual_ops([2.0 * u], 1.0, 10), fam, x, x[:2], 1.0)
        np.testing.assert_allclose(b.k_train, 2.0 * a.k_train, atol=1e-12)

    def test_training_point_interpolation(self):
        sigma = 1.0
        fam, x, g, k0, y = make_instance(8, 16, 3, sigma, seed=54)
        ops = solve_order_params_l1(g, k0, y, 30, sigma)
        ds = Dataset(x, y, x[:5], y[:5])
        stats = predict(ops, fam, ds, x[:5], sigma)
        np.testing.assert_allclose(stats.mean, y[:5], atol=1e-7)
        np.testing.assert_allclose(stats.variance, 0.0, atol=1e-7)

    @pytest.mark.parametrize("depth", [1, 2])
    def test_single_gate_mean_matches_gp(self, depth):
        # Scalar renormalization cancels from the mean predictor, so with a
        # single gate the finite-width mean equals the infinite-width mean.
        n0, p, n, sigma = 40, 25, 35, 1.1
        fam = random_halfspace_family(n0, 1, -1e9, seed=55)
        rng = np.random.default_rng(56)
        x = rng.standard_normal((p, n0))
        y = rng.standard_normal(p)
        xt = rng.standard_normal((100, n0))
        g = evaluate(fam, x)
        k0 = input_kernel(x, x, sigma)
        if depth == 1:
            ops = solve_order_params_l1(g, k0, y, n, sigma, SolverConfig(tol=1e-12))
        else:
            ops = solve_order_params_deep(depth, g, k0, y, n, sigma,
                                          SolverConfig(grad_tol=1e-9))
        assert abs(ops.u[0][0, 0] - sigma ** 2) > 1e-3  # renormalization active
        stats = predict(ops, fam, Dataset(x, y, xt, np.zeros(100)), xt, sigma)
        gp_stats = gp_predict(gp_kernel(fam, x, xt, sigma, depth), y)
        scale = np.sqrt(np.mean(gp_stats.mean ** 2))
        assert np.max(np.abs(stats.mean - gp_stats.mean)) <= 1e-6 * scale


class TestBiasVarianceErrorRate:
    def test_bias_variance_hand_case(self):
        stats = PredictorStats(mean=np.array([1.0, 0.0]), variance=np.array([0.5, 0.5]))
        bias, var, eg = renorm.bias_variance(stats, np.array([0.0, 0.0]))
        assert (bias, var, eg) == (0.5, 0.5, 1.0)

    def test_zero_variance_reduces_to_bias(self):
        stats = PredictorStats(mean=np.array([0.2, -0.4]), variance=np.zeros(2))
        bias, var, eg = renorm.bias_variance(stats, np.array([0.0, 0.0]))
        assert var == 0.0 and eg == bias

    def test_exact_mean_zero_bias(self):
        y = np.array([0.3, -0.7, 1.1])
        stats = PredictorStats(mean=y.copy(), variance=np.full(3, 0.2))
        bias, var, eg = renorm.bias_variance(stats, y)
        assert bias == 0.0 and eg == pytest.approx(0.2)

    def test_error_rate_hand_value(self):
        # y=-1, mean 0.5, variance 0.25: rate = Phi(1) = 0.84134.
        stats = PredictorStats(mean=np.array([0.5]), variance=np.array([0.25]))
        rates, mean_rate = renorm.error_rate(stats, np.array([-1.0]))
        assert rates[0] == pytest.approx(0.8413447, abs=1e-6)
        assert mean_rate == rates[0]

    def test_error_rate_limits(self):
        stats = PredictorStats(mean=np.array([50.0, 0.0]), variance=np.array([1.0, 4.0]))
        rates, _ = renorm.error_rate(stats, np.array([1.0, 1.0]))
        assert rates[0] == pytest.approx(0.0, abs=1e-12)
        assert rates[1] == pytest.approx(0.5)

    def test_error_rate_zero_variance_sign_rule(self):
        stats = PredictorStats(mean=np.array([0.4, -0.4, 0.0]), variance=np.zeros(3))
        rates, _ = renorm.error_rate(stats, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(rates, [0.0, 1.0, 0.5])

    def test_rejects_bad_labels(self):
        stats = PredictorStats(mean=np.zeros(2), variance=np.ones(2))
        with pytest.raises(DimensionMismatch):
            renorm.error_rate(stats, np.array([1.0, 0.5]))


class TestLangevinOracleSmall:
    def test_order_params_match_posterior_at_nonunit_sigma(self):
        # External oracle away from sigma = 1: the sampled readout second
        # moment must reproduce the solved order parameter, pinning down the
        # sigma-dependence of the self-consistent equation.
        from ggdln.network import Architecture
        from ggdln.samplers import (
            TrainConfig,
            estimate_readout_covariance,
            langevin_readout_snapshots,
        )

        n0, p, m, n, sigma, temp = 12, 24, 3, 40, 0.8, 1e-2
        fam, x, g, k0, y = make_instance(n0, p, m, sigma, seed=61)
        ops = solve_order_params_l1(g, k0, y, n, sigma, SolverConfig(ridge=temp))
        ds = Dataset(x, y, x[:2], y[:2])
        arch = Architecture(1, n, m, n0, sigma)
        cfg = TrainConfig(learning_rate=2e-3, max_steps=30000, temperature=temp,
                          burn_in=8000, thinning=50)
        snaps = langevin_readout_snapshots(ds, fam, arch, cfg, 62, n_chains=8)
        u_hat, _ = estimate_readout_covariance(snaps)
        rel = np.linalg.norm(u_hat - ops.u[0]) / np.linalg.norm(u_hat)
        assert rel <= 0.2
        # And the renormalization must actually be active at P/N = 0.6.
        assert np.linalg.norm(ops.u[0] - sigma ** 2 * np.eye(m)) > 0.05
