import numpy as np
import pytest

from learning.gp_dynamics import GpModel
from learning.gradients import grad_cost
from learning.rollout import (GaussianBelief, closed_loop, expected_cost, gp_moments, gp_taylor_moments,
                              joint_z_moments, make_context, propagate, psd_floor, rollout_cost,
                              saturating_cost, simulate_rollout)
from plant.bench import run_trial
from settings import CostConfig, RolloutConfig

L_INV = np.array([0.25, 1.0, 25.0, 100.0])


def random_spd(rng, n=4, scale=1e-3):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T + n * np.eye(n))


class TestJointMoments:
    def test_point_belief(self, controller, ref):
        bx = GaussianBelief(mu=ref.xbar[20] + 0.1, sigma=np.zeros((4, 4)))
        bz = joint_z_moments(bx, controller, 20)
        np.testing.assert_array_equal(bz.mu[:4], bx.mu)
        np.testing.assert_array_equal(bz.mu[4:], controller.control(bx.mu, 20))
        np.testing.assert_array_equal(bz.sigma, 0.0)

    def test_covariance_blocks(self, controller, ref):
        sigma = random_spd(np.random.default_rng(0))
        bz = joint_z_moments(GaussianBelief(mu=ref.xbar[3], sigma=sigma), controller, 3)
        k = controller.gain
        np.testing.assert_allclose(bz.sigma[:4, :4], sigma, rtol=1e-14)
        np.testing.assert_allclose(bz.sigma[:4, 4:], -sigma @ k.T, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(bz.sigma[4:, 4:], k @ sigma @ k.T, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(bz.sigma[5, :], 0.0)


class TestGpMoments:
    def test_disabled_model(self):
        bz = GaussianBelief(mu=np.zeros(7), sigma=np.eye(7))
        assert gp_taylor_moments(GpModel.disabled(), 0, bz) == (0.0, 0.0)
        mean, var, _ = gp_moments(GpModel.disabled(), bz)
        assert not mean.any() and not var.any()

    def test_certain_input_gives_posterior(self, synthetic_gp):
        zs = synthetic_gp.dataset.z[4] + 0.01
        bz = GaussianBelief(mu=zs, sigma=np.zeros((7, 7)))
        for d in range(4):
            assert gp_taylor_moments(synthetic_gp, d, bz) == pytest.approx(synthetic_gp.posterior(d, zs),
                                                                           rel=1e-7, abs=1e-13)

    def test_input_variance_term_is_linear(self, synthetic_gp):
        zs = synthetic_gp.dataset.z[9]
        sigma = np.diag(0.01 * synthetic_gp.hypers[0].lengthscales ** 2)
        _, v0 = gp_taylor_moments(synthetic_gp, 0, GaussianBelief(zs, np.zeros((7, 7))))
        _, v1 = gp_taylor_moments(synthetic_gp, 0, GaussianBelief(zs, sigma))
        _, v2 = gp_taylor_moments(synthetic_gp, 0, GaussianBelief(zs, 2.0 * sigma))
        assert v1 > v0
        assert v2 - v0 == pytest.approx(2.0 * (v1 - v0), rel=1e-10)

    def test_vectorized_matches_per_output(self, synthetic_gp):
        zs = synthetic_gp.dataset.z[2]
        bz = GaussianBelief(zs, np.diag(0.005 * synthetic_gp.hypers[0].lengthscales ** 2))
        mean, var, _ = gp_moments(synthetic_gp, bz)
        for d in range(4):
            assert (mean[d], var[d]) == pytest.approx(gp_taylor_moments(synthetic_gp, d, bz), rel=1e-10)

    def test_monte_carlo_spread(self, synthetic_gp):
        gp = synthetic_gp.outputs[0]
        ell = synthetic_gp.hypers[0].lengthscales
        sigma = np.diag(0.01 * ell ** 2)
        rng = np.random.default_rng(11)
        rows = synthetic_gp.dataset.z[rng.integers(0, synthetic_gp.dataset.n, size=200)]
        candidates = rows + rng.normal(size=rows.shape) * 0.5 * ell

        # first-order spread against the second-order term it leaves out
        def orders(zs):
            _, _, dmu, _, d2mu = gp.predict_with_derivatives(zs)
            hs = d2mu @ sigma
            return float(dmu @ sigma @ dmu), 0.5 * float(np.trace(hs @ hs))

        first, second = np.array([orders(c) for c in candidates]).T
        ratios = np.where(first >= 0.1 * first.max(), second / np.maximum(first, 1e-300), np.inf)
        zs = candidates[int(np.argmin(ratios))]
        assert ratios.min() < 0.1

        samples = zs + rng.normal(size=(100000, 7)) * np.sqrt(np.diag(sigma))
        means = gp.mean_batch(samples)
        mu, var_taylor = gp_taylor_moments(synthetic_gp, 0, GaussianBelief(zs, sigma))
        _, var_point, _, _, d2mu = gp.predict_with_derivatives(zs)
        spread = var_taylor - var_point
        assert np.var(means) == pytest.approx(spread, rel=0.15)
        curved = mu + 0.5 * float(np.sum(np.diag(d2mu) * np.diag(sigma)))
        assert abs(np.mean(means) - curved) < 0.05 * np.sqrt(spread)


class TestPropagate:
    def test_nominal_model_without_gp(self, controller, ref, dss):
        rng = np.random.default_rng(1)
        bx = GaussianBelief(mu=ref.xbar[40] + rng.normal(size=4) * 0.05, sigma=random_spd(rng))
        nxt = propagate(bx, controller, 40, GpModel.disabled(), dss)
        np.testing.assert_allclose(nxt.mu, dss.step(bx.mu, controller.control(bx.mu, 40)), rtol=1e-14)
        m = closed_loop(dss, controller)
        np.testing.assert_allclose(nxt.sigma, m @ bx.sigma @ m.T, rtol=1e-12, atol=1e-15)

    def test_gp_shifts_mean_and_adds_variance(self, controller, ref, dss, synthetic_gp):
        bx = GaussianBelief(mu=ref.xbar[60].copy(), sigma=np.zeros((4, 4)))
        nominal = propagate(bx, controller, 60, GpModel.disabled(), dss)
        learned = propagate(bx, controller, 60, synthetic_gp, dss)
        mean_f, var_f, _ = gp_moments(synthetic_gp, joint_z_moments(bx, controller, 60))
        np.testing.assert_allclose(learned.mu - nominal.mu, mean_f, atol=1e-12)
        np.testing.assert_allclose(np.diag(learned.sigma), var_f, rtol=1e-10)

    def test_psd_floor(self):
        a = np.array([[1.0, 2.0], [2.0, 1.0]])
        floored = psd_floor(a)
        assert np.min(np.linalg.eigvalsh(floored)) >= -1e-12
        np.testing.assert_allclose(floored, [[1.5, 1.5], [1.5, 1.5]])
        spd = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_array_equal(psd_floor(spd), spd)


class TestCost:
    def test_on_target_with_certainty(self):
        bx = GaussianBelief(mu=np.ones(4), sigma=np.zeros((4, 4)))
        assert expected_cost(bx, np.ones(4), L_INV) == 0.0

    def test_deterministic_limit(self):
        rng = np.random.default_rng(2)
        x, xbar = rng.normal(size=4), rng.normal(size=4)
        bx = GaussianBelief(mu=x, sigma=np.zeros((4, 4)))
        assert expected_cost(bx, xbar, L_INV) == pytest.approx(saturating_cost(x, xbar, L_INV), abs=1e-12)

    def test_known_uncertainty(self):
        bx = GaussianBelief(mu=np.zeros(4), sigma=np.diag(1.0 / L_INV))
        assert expected_cost(bx, np.zeros(4), L_INV) == pytest.approx(0.75)

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            bx = GaussianBelief(mu=rng.normal(size=4) * 3.0, sigma=random_spd(rng, scale=0.1))
            assert 0.0 <= expected_cost(bx, np.zeros(4), L_INV) < 1.0

    def test_far_from_target_stays_below_one(self):
        bx = GaussianBelief(mu=np.full(4, 7.0), sigma=np.zeros((4, 4)))
        cost = expected_cost(bx, np.zeros(4), L_INV)
        assert cost < 1.0
        assert cost == pytest.approx(1.0)
        assert saturating_cost(np.full(4, 7.0), np.zeros(4), L_INV) < 1.0
        de_dmu, de_dsig = grad_cost(bx, np.zeros(4), L_INV)
        assert np.all(np.isfinite(de_dmu)) and np.all(np.isfinite(de_dsig))

    def test_zero_weights(self):
        bx = GaussianBelief(mu=np.full(4, 5.0), sigma=np.eye(4))
        assert expected_cost(bx, np.zeros(4), np.zeros(4)) == pytest.approx(0.0, abs=1e-15)


class TestSimulateRollout:
    def test_lengths_and_total(self, policy, disabled_context):
        result = simulate_rollout(policy, disabled_context)
        assert len(result.beliefs) == 101
        assert result.step_costs.shape == (101,)
        assert result.J == pytest.approx(float(np.sum(result.step_costs)))
        assert rollout_cost(policy, disabled_context) == result.J

    def test_covariances_stay_psd(self, policy, gp_context):
        for belief in simulate_rollout(policy, gp_context).beliefs:
            np.testing.assert_array_equal(belief.sigma, belief.sigma.T)
            assert np.min(np.linalg.eigvalsh(belief.sigma)) >= -1e-12

    def test_shorter_horizon(self, policy, dss, ref):
        context = make_context(dss, ref, GpModel.disabled(), CostConfig(), RolloutConfig(), horizon=10)
        assert len(simulate_rollout(policy, context).beliefs) == 11

    def test_zero_cost_weights(self, policy, dss, ref):
        cost = CostConfig(l_inv=(0.0, 0.0, 0.0, 0.0))
        context = make_context(dss, ref, GpModel.disabled(), cost, RolloutConfig())
        assert rollout_cost(policy, context) == pytest.approx(0.0, abs=1e-12)

    def test_torque_phase_is_free(self, policy, dss, ref):
        context = make_context(dss, ref, GpModel.disabled(), CostConfig(), RolloutConfig(initial_variance=0.0))
        costs = simulate_rollout(policy, context).step_costs
        torque_phase = ref.t_grid <= ref.t_torque_end
        assert np.max(costs[torque_phase]) < 1e-12

    def test_matches_ideal_bench(self, controller, policy, dss, ref, x0, ideal_bench):
        context = make_context(dss, ref, GpModel.disabled(), CostConfig(), RolloutConfig(initial_variance=0.0))
        means = np.array([b.mu for b in simulate_rollout(policy, context).beliefs])
        trial = run_trial(controller, ref, ideal_bench, dss, x0)
        assert np.max(np.abs(means - trial.states)) < 1e-9
