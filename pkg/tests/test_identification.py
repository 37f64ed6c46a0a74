import pytest
import sys
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from asr.benchmarks import figure1_params
from asr.errors import IdentifiabilityError, ModelValidationError
from asr.identification import (
    IdentifiedParams,
    MomentSummary,
    align_orthogonal,
    estimate_moments,
    factor_from_gram,
    identification_errors,
    observationally_equivalent,
    population_moments,
    recover_action_effects,
    recover_all,
)
from asr.linear_env import LinearModelParams, TrajectoryBatch, cross_cov_ya, simulate, simulate_batch


def random_model(rng: np.random.Generator, d_s: int) -> LinearModelParams:
    """Stable model with an invertible transition and a full-rank stacked loading"""
    d_o = d_s + 2
    C_s = np.tril(0.3 * rng.standard_normal((d_s, d_s)), k=-1)
    C_s[np.diag_indices(d_s)] = rng.uniform(0.3, 0.8, size=d_s)
    C_s_to_o = 0.3 * rng.standard_normal((d_s, d_o))
    C_s_to_o[:, :d_s] += np.eye(d_s)
    return LinearModelParams(
        C_s_to_o=C_s_to_o,
        C_s_to_r=rng.uniform(0.3, 0.9, size=d_s),
        C_a_to_r=rng.uniform(-0.5, 0.5, size=1),
        C_s=C_s,
        C_a_to_s=rng.uniform(0.3, 0.8, size=(1, d_s)),
        cov_e=np.diag(rng.uniform(0.05, 0.2, size=d_o)),
        var_eps=float(rng.uniform(0.05, 0.2)),
        cov_a=np.eye(1),
    )


def random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class TestPopulationRecovery:
    """Exact moments must give exact identifiable quantities"""

    def setup_method(self):
        self.params = figure1_params()

    def test_figure1_exact(self):
        ident = recover_all(population_moments(self.params, K=6), d_state=3)
        errors = identification_errors(ident, self.params)
        for name, err in errors.items():
            assert err < 1e-6, (name, err)
        assert ident.diagnostics["omega_rank"] == 3
        assert ident.diagnostics["eigen_gap"]["suggested_d_state"] == 3

    def test_random_models_exact(self):
        rng = np.random.default_rng(7)
        for k in range(50):
            params = random_model(rng, d_s=1 + k % 4)
            ident = recover_all(population_moments(params, K=5), d_state=params.d_s)
            errors = identification_errors(ident, params)
            assert max(errors.values()) < 1e-6, (k, errors)

    def test_rotation_invariance(self):
        U = random_rotation(np.random.default_rng(1), 3)
        a = recover_all(population_moments(self.params, K=6), d_state=3)
        b = recover_all(population_moments(self.params.rotate(U), K=6), d_state=3)
        assert_allclose(a.C_a_to_r_hat, b.C_a_to_r_hat, atol=1e-8)
        for Sa, Sb in zip(a.S_hat, b.S_hat):
            assert_allclose(Sa, Sb, atol=1e-8)
        assert_allclose(a.omega_hat, b.omega_hat, atol=1e-8)
        assert_allclose(a.cov_e_hat, b.cov_e_hat, atol=1e-8)
        assert_allclose(a.gram_hat, b.gram_hat, atol=1e-8)

    def test_full_rank_request_on_reduced_state_fails(self):
        # p = 6 observables but only 3 latent dims: rank 6 is not supported by the data
        with pytest.raises(IdentifiabilityError):
            recover_all(population_moments(self.params, K=6))

    def test_d_state_above_p_rejected(self):
        with pytest.raises(ModelValidationError):
            recover_all(population_moments(self.params, K=6), d_state=7)

    def test_dict_round_trip(self):
        ident = recover_all(population_moments(self.params, K=6), d_state=3)
        restored = IdentifiedParams.from_dict(ident.to_dict())
        assert_allclose(restored.omega_hat, ident.omega_hat)
        assert_allclose(restored.loading_hat, ident.loading_hat)
        assert len(restored.S_hat) == len(ident.S_hat)


class TestEquivalence:

    def setup_method(self):
        self.params = figure1_params()

    def test_rotated_model_is_equivalent(self):
        U = random_rotation(np.random.default_rng(4), 3)
        assert observationally_equivalent(self.params, self.params.rotate(U), K=5, tol=1e-10)

    def test_changed_coefficient_is_not(self):
        data = self.params.to_dict()
        data["C_s_to_r"] = [0.0, 0.7, 0.5]
        other = LinearModelParams.from_dict(data)
        assert not observationally_equivalent(self.params, other, K=5, tol=1e-10)

    def test_align_orthogonal_recovers_rotation(self):
        U = random_rotation(np.random.default_rng(9), 3)
        L = self.params.stacked_loading
        est, err = align_orthogonal(U @ L, L)
        assert_allclose(est, U, atol=1e-10)
        assert err < 1e-10

    def test_factor_from_gram(self):
        L = self.params.stacked_loading
        factor, gap = factor_from_gram(L.T @ L, 3)
        assert factor.shape == (3, 6)
        assert_allclose(factor.T @ factor, L.T @ L, atol=1e-10)
        assert gap["suggested_d_state"] == 3
        _, err = align_orthogonal(factor, L)
        assert err < 1e-8


class TestSampleMoments:

    def setup_method(self):
        self.params = figure1_params()

    def test_K_too_large(self):
        batch = simulate_batch(self.params, episodes=2, T=10, seed=0)
        with pytest.raises(ModelValidationError):
            estimate_moments(batch, K=9)

    def test_too_few_samples(self):
        batch = simulate_batch(self.params, episodes=1, T=50, seed=0)
        with pytest.raises(ModelValidationError):
            estimate_moments(batch, K=6)

    def test_shapes(self):
        batch = simulate_batch(self.params, episodes=2, T=500, seed=0)
        m = estimate_moments(batch, K=4)
        assert m.K == 4
        assert m.p == 6
        assert m.R_y[0].shape == (6, 6)
        assert m.C_ya[2].shape == (6, 1)
        assert m.n_samples == 998

    def test_singular_action_covariance(self):
        m = population_moments(self.params, K=3)
        degenerate = MomentSummary(R_y=m.R_y, C_ya=m.C_ya, var_a=np.zeros((1, 1)), n_samples=0)
        with pytest.raises(IdentifiabilityError):
            recover_action_effects(degenerate)

    @pytest.mark.slow
    def test_error_shrinks_at_root_n(self):
        lengths = [5000, 20000, 80000]
        medians = []
        for T in lengths:
            errs = []
            for seed in range(5):
                traj = simulate(self.params, T=T, seed=seed)
                eff = recover_action_effects(estimate_moments(TrajectoryBatch((traj,)), K=3))
                err = np.max(np.abs(eff.C_a_to_r_hat - self.params.C_a_to_r))
                for k, S in enumerate(eff.S_hat):
                    err = max(err, np.max(np.abs(S - cross_cov_ya(self.params, k + 1))))
                errs.append(err)
            medians.append(np.median(errs))
        slope = np.polyfit(np.log(lengths), np.log(medians), 1)[0]
        assert -0.8 <= slope <= -0.25


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
