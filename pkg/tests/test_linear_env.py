import pytest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from asr.benchmarks import figure1_params, steering_params
from asr.errors import ModelValidationError
from asr.linear_env import (
    LinearModelParams,
    LinearPOMDPEnv,
    TrajectoryBatch,
    autocov_y,
    cross_cov_ya,
    simulate,
    simulate_batch,
    stationary_state_cov,
)


class TestLinearModelParams:
    """Validation and basic algebra of the parameter container"""

    def setup_method(self):
        self.params = figure1_params()

    def test_dimensions(self):
        p = self.params
        assert (p.d_s, p.d_o, p.d_a, p.p) == (3, 5, 1, 6)
        assert p.stacked_loading.shape == (3, 6)
        assert p.is_stationary()

    def test_shape_mismatch_rejected(self):
        data = self.params.to_dict()
        data["C_s_to_r"] = [0.1, 0.2]
        with pytest.raises(ModelValidationError):
            LinearModelParams.from_dict(data)

    def test_indefinite_noise_rejected(self):
        data = self.params.to_dict()
        data["cov_e"] = (-np.eye(5)).tolist()
        with pytest.raises(ModelValidationError):
            LinearModelParams.from_dict(data)

    def test_negative_reward_noise_rejected(self):
        data = self.params.to_dict()
        data["var_eps"] = -0.1
        with pytest.raises(ModelValidationError):
            LinearModelParams.from_dict(data)

    def test_unstable_transition_flagged(self):
        data = self.params.to_dict()
        data["C_s"] = (1.1 * np.eye(3)).tolist()
        unstable = LinearModelParams.from_dict(data)
        assert not unstable.is_stationary()
        with pytest.raises(ModelValidationError):
            stationary_state_cov(unstable)

    def test_dict_round_trip(self):
        assert LinearModelParams.from_dict(self.params.to_dict()) == self.params

    def test_rotation_must_be_orthogonal(self):
        with pytest.raises(ModelValidationError):
            self.params.rotate(2.0 * np.eye(3))


class TestMoments:
    """Closed-form stationary moments"""

    def setup_method(self):
        self.params = figure1_params()

    def test_lyapunov_fixed_point(self):
        p = self.params
        P = stationary_state_cov(p)
        A = p.C_s.T
        Q = p.C_a_to_s.T @ p.cov_a @ p.C_a_to_s + np.eye(3)
        assert_allclose(P, A @ P @ A.T + Q, atol=1e-10)

    def test_lag_zero_cross_covariance(self):
        C0 = cross_cov_ya(self.params, 0)
        assert_allclose(C0[:-1], 0.0)
        assert_allclose(C0[-1], self.params.C_a_to_r)

    def test_negative_lag_rejected(self):
        with pytest.raises(ModelValidationError):
            cross_cov_ya(self.params, -1)
        with pytest.raises(ModelValidationError):
            autocov_y(self.params, -1)

    def test_empirical_moments_match(self):
        traj = simulate(self.params, T=50000, seed=3)
        y = np.column_stack([traj.observations[:-1], traj.rewards])
        y = y - y.mean(axis=0)
        emp0 = y.T @ y / len(y)
        emp1 = y[:-1].T @ y[1:] / (len(y) - 1)
        assert_allclose(emp0, autocov_y(self.params, 0), atol=0.25)
        assert_allclose(emp1, autocov_y(self.params, 1), atol=0.25)

        a = traj.actions - traj.actions.mean(axis=0)
        emp_c1 = y[1:].T @ a[:-1] / (len(y) - 1)
        assert_allclose(emp_c1, cross_cov_ya(self.params, 1), atol=0.05)


class TestSimulation:

    def setup_method(self):
        self.params = steering_params()

    def test_shapes(self):
        traj = simulate(self.params, T=20, seed=0)
        assert traj.observations.shape == (20, 3)
        assert traj.actions.shape == (19, 1)
        assert traj.rewards.shape == (19,)
        assert traj.latents.shape == (20, 2)
        assert traj.iid_actions

    def test_deterministic_given_seed(self):
        a = simulate(self.params, T=30, seed=11)
        b = simulate(self.params, T=30, seed=11)
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.rewards, b.rewards)

    def test_reward_follows_emission(self):
        p = self.params.to_dict()
        p["var_eps"] = 0.0
        params = LinearModelParams.from_dict(p)
        traj = simulate(params, T=25, seed=2)
        expected = traj.latents[:-1] @ params.C_s_to_r + traj.actions @ params.C_a_to_r
        assert_allclose(traj.rewards, expected, atol=1e-12)

    def test_policy_marks_non_iid(self):
        traj = simulate(self.params, T=10, seed=0, policy=lambda o, rng: np.ones(1))
        assert not traj.iid_actions
        assert np.all(traj.actions == 1.0)

    def test_too_short(self):
        with pytest.raises(ModelValidationError):
            simulate(self.params, T=2, seed=0)

    def test_batch_records_round_trip(self):
        batch = simulate_batch(self.params, episodes=3, T=12, seed=5)
        restored = TrajectoryBatch.from_records(batch.to_records())
        assert len(restored) == 3
        for a, b in zip(batch, restored):
            assert np.array_equal(a.observations, b.observations)
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.rewards, b.rewards)

    def test_batch_episodes_differ(self):
        batch = simulate_batch(self.params, episodes=2, T=12, seed=5)
        assert not np.array_equal(batch.episodes[0].observations, batch.episodes[1].observations)


class TestEnvironment:

    def test_step_before_reset(self):
        env = LinearPOMDPEnv(steering_params(), 0)
        with pytest.raises(ModelValidationError):
            env.step(np.ones(1))

    def test_step_returns_reward_and_observation(self):
        env = LinearPOMDPEnv(steering_params(), 0)
        o = env.reset()
        assert o.shape == (3,)
        r, o_next = env.step(np.array([1.0]))
        assert isinstance(r, float)
        assert o_next.shape == (3,)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
