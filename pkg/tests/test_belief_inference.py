import pytest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from asr.belief_inference import (
    GaussianBelief,
    asr_belief,
    dense_posterior,
    filter_init,
    filter_step,
    filter_trajectory,
    predict,
    smooth,
    update,
)
from asr.benchmarks import figure1_params, steering_params
from asr.errors import ModelValidationError, NumericalError
from asr.linear_env import LinearModelParams, simulate, stationary_state_cov


class TestFilter:
    """Kalman filter against the exact joint-Gaussian posterior"""

    def setup_method(self):
        self.params = figure1_params()
        self.traj = simulate(self.params, T=12, seed=4)

    def test_smoother_matches_dense_posterior(self):
        means, covs = dense_posterior(self.params, self.traj)
        smoothed = smooth(self.params, self.traj)
        for t, belief in enumerate(smoothed):
            assert_allclose(belief.mean, means[t], atol=1e-8)
            assert_allclose(belief.cov, covs[t], atol=1e-8)

    def test_last_filtered_matches_dense_posterior(self):
        means, covs = dense_posterior(self.params, self.traj)
        result = filter_trajectory(self.params, self.traj)
        assert_allclose(result.filtered[-1].mean, means[-1], atol=1e-8)
        assert_allclose(result.filtered[-1].cov, covs[-1], atol=1e-8)

    def test_reward_refines_decision_belief(self):
        result = filter_trajectory(self.params, self.traj)
        for dec, filt in zip(result.decision[:-1], result.filtered[:-1]):
            assert np.trace(filt.cov) <= np.trace(dec.cov) + 1e-12
        assert len(result.predicted) == len(result.decision) == len(result.filtered) == self.traj.T

    def test_first_prior_is_stationary(self):
        result = filter_trajectory(self.params, self.traj)
        assert_allclose(result.predicted[0].mean, 0.0)
        assert_allclose(result.predicted[0].cov, stationary_state_cov(self.params))

    def test_dimension_mismatch(self):
        with pytest.raises(ModelValidationError):
            filter_trajectory(steering_params(), self.traj)


class TestUpdates:

    def setup_method(self):
        self.params = steering_params()

    def test_predict(self):
        belief = GaussianBelief(np.array([1.0, -1.0]), np.eye(2))
        prior = predict(self.params, belief, np.array([2.0]))
        assert_allclose(prior.mean, [0.8 + 1.0, -0.8])
        assert_allclose(prior.cov, np.diag([0.64 + 1.0, 0.64 + 1.0]))

    def test_reward_update_needs_action(self):
        with pytest.raises(ModelValidationError):
            update(self.params, filter_init(self.params), r_next=1.0)

    def test_no_evidence_returns_prior(self):
        prior = filter_init(self.params)
        assert update(self.params, prior) is prior

    def test_singular_innovation(self):
        params = LinearModelParams(
            C_s_to_o=np.zeros((2, 2)), C_s_to_r=[0.0, 0.0], C_a_to_r=[0.0], C_s=0.5 * np.eye(2),
            C_a_to_s=[[0.0, 0.0]], cov_e=np.zeros((2, 2)), var_eps=0.1, cov_a=np.eye(1),
        )
        with pytest.raises(NumericalError):
            update(params, filter_init(params), o=np.zeros(2))

    def test_uninformative_noiseless_reward_is_skipped(self):
        params = LinearModelParams(
            C_s_to_o=np.eye(2), C_s_to_r=[0.0, 0.0], C_a_to_r=[0.0], C_s=0.5 * np.eye(2),
            C_a_to_s=[[0.0, 0.0]], cov_e=0.1 * np.eye(2), var_eps=0.0, cov_a=np.eye(1),
        )
        prior = filter_init(params)
        assert update(params, prior, r_next=0.0, a_now=np.zeros(1)) is prior

    def test_asr_marginal(self):
        belief = GaussianBelief(np.arange(3.0), np.diag([1.0, 2.0, 3.0]))
        marginal = asr_belief(belief, {2, 1})
        assert_allclose(marginal.mean, [1.0, 2.0])
        assert_allclose(marginal.cov, np.diag([2.0, 3.0]))
        assert asr_belief(belief, set()).dim == 0
        with pytest.raises(ModelValidationError):
            asr_belief(belief, {3})

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ModelValidationError):
            GaussianBelief(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestScalarStep:
    """One predict-update cycle worked by hand"""

    def setup_method(self):
        self.params = LinearModelParams(
            C_s_to_o=[[0.9]], C_s_to_r=[0.6], C_a_to_r=[0.3], C_s=[[0.7]], C_a_to_s=[[0.4]],
            cov_e=[[0.2]], var_eps=0.1, cov_a=[[1.0]],
        )
        self.belief = GaussianBelief(np.array([0.5]), np.array([[2.0]]))

    def test_hand_computed_step(self):
        m, P = 0.7 * 0.5 + 0.4 * 1.0, 0.49 * 2.0 + 1.0
        k = 0.9 * P / (0.81 * P + 0.2)
        m, P = m + k * (1.2 - 0.9 * m), (1.0 - 0.9 * k) * P
        k = 0.6 * P / (0.36 * P + 0.1)
        m, P = m + k * (0.3 - 0.3 * 0.5 - 0.6 * m), (1.0 - 0.6 * k) * P

        prior = predict(self.params, self.belief, np.array([1.0]))
        sequential = update(self.params, update(self.params, prior, o=np.array([1.2])),
                            r_next=0.3, a_now=np.array([0.5]))
        stacked = filter_step(self.params, self.belief, np.array([1.0]), np.array([1.2]), 0.3, np.array([0.5]))
        for belief in (sequential, stacked):
            assert abs(belief.mean[0] - m) < 1e-12
            assert abs(belief.cov[0, 0] - P) < 1e-12


class TestLongRuns:
    """Calibration and covariance ordering over long trajectories"""

    def setup_method(self):
        self.params = figure1_params()

    @pytest.mark.slow
    def test_innovations_are_white(self):
        traj = simulate(self.params, T=1000, seed=8)
        result = filter_trajectory(self.params, traj)
        H = self.params.C_s_to_o.T
        white = []
        for t, prior in enumerate(result.predicted):
            S = H @ prior.cov @ H.T + self.params.cov_e
            resid = traj.observations[t] - H @ prior.mean
            white.append(np.linalg.solve(np.linalg.cholesky(S), resid))
        white = np.concatenate(white)
        assert abs(white.mean()) < 0.1
        assert 0.8 <= white.var() <= 1.2

    @pytest.mark.slow
    def test_loewner_order(self):
        traj = simulate(self.params, T=300, seed=9)
        result = filter_trajectory(self.params, traj)
        smoothed = smooth(self.params, traj)
        for t in range(traj.T):
            pred, dec, filt = result.predicted[t].cov, result.decision[t].cov, result.filtered[t].cov
            assert np.linalg.eigvalsh(pred - dec).min() >= -1e-10
            assert np.linalg.eigvalsh(dec - filt).min() >= -1e-10
            assert np.linalg.eigvalsh(filt - smoothed[t].cov).min() >= -1e-10

    @pytest.mark.slow
    def test_covariances_stay_psd(self):
        traj = simulate(self.params, T=10000, seed=10)
        result = filter_trajectory(self.params, traj)
        for belief in result.filtered:
            assert np.array_equal(belief.cov, belief.cov.T)
            assert np.linalg.eigvalsh(belief.cov).min() > 0.0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
