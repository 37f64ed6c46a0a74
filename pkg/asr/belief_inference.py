"""Exact Gaussian beliefs over the latent state: Kalman filter, RTS smoother, ASR marginals.

The filter is split so that the belief available at decision time uses o_t only;
the reward r_{t+1} observed after acting refines the belief over s_t afterwards.
Since the observation and reward noises are independent, the sequential o-then-r
update equals the joint update against the stacked [o_t; r_{t+1}].
"""

from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Optional, Tuple

import numpy as np
from scipy.linalg import block_diag
from loguru import logger

from .errors import ModelValidationError, NumericalError
from .linear_env import LinearModelParams, Trajectory, stationary_state_cov

MAX_INNOVATION_CONDITION = 1e14


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size)
        if mean.size and not np.allclose(cov, cov.T, atol=1e-10):
            raise ModelValidationError("belief covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        w, V = np.linalg.eigh(self.cov)
        return self.mean + (V * np.sqrt(np.clip(w, 0.0, None))) @ rng.standard_normal(self.dim)


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def filter_init(params: LinearModelParams) -> GaussianBelief:
    return GaussianBelief(np.zeros(params.d_s), stationary_state_cov(params))


def predict(params: LinearModelParams, belief: GaussianBelief, a_prev: np.ndarray) -> GaussianBelief:
    A = params.C_s.T
    mean = A @ belief.mean + params.C_a_to_s.T @ np.asarray(a_prev, dtype=float).reshape(params.d_a)
    cov = A @ belief.cov @ A.T + np.eye(params.d_s)
    return GaussianBelief(mean, _sym(cov))


def _kalman_update(belief: GaussianBelief, H: np.ndarray, resid: np.ndarray, R: np.ndarray) -> GaussianBelief:
    """Joseph-form update for y = H s + v, v ~ N(0, R); `resid` is y - H mean"""
    P = belief.cov
    S = _sym(H @ P @ H.T + R)
    w = np.linalg.eigvalsh(S)
    if w.min() <= 0 or w.max() / w.min() > MAX_INNOVATION_CONDITION:
        raise NumericalError("innovation covariance is singular: noise is zero and the loading is rank deficient")
    K = np.linalg.solve(S, H @ P).T
    I_KH = np.eye(P.shape[0]) - K @ H
    cov = I_KH @ P @ I_KH.T + K @ R @ K.T
    return GaussianBelief(belief.mean + K @ resid, _sym(cov))


def update(params: LinearModelParams, prior: GaussianBelief, o: Optional[np.ndarray] = None,
           r_next: Optional[float] = None, a_now: Optional[np.ndarray] = None) -> GaussianBelief:
    """Condition a belief over s_t on o_t and/or r_{t+1} (which also needs a_t)"""
    rows, resid, noise = [], [], []
    if o is not None:
        o = np.asarray(o, dtype=float).reshape(params.d_o)
        rows.append(params.C_s_to_o.T)
        resid.append(o)
        noise.append(params.cov_e)
    if r_next is not None:
        if a_now is None:
            raise ModelValidationError("a reward update needs the action taken at the same step")
        a_now = np.asarray(a_now, dtype=float).reshape(params.d_a)
        # a noiseless reward with no state loading says nothing about s_t
        if params.var_eps > 0 or np.any(params.C_s_to_r):
            rows.append(params.C_s_to_r[None, :])
            resid.append(np.atleast_1d(float(r_next) - params.C_a_to_r @ a_now))
            noise.append(np.array([[params.var_eps]]))
    if not rows:
        return prior
    H = np.vstack(rows)
    y = np.concatenate(resid)
    return _kalman_update(prior, H, y - H @ prior.mean, block_diag(*noise))


def filter_step(params: LinearModelParams, belief: GaussianBelief, a_prev: np.ndarray, o: np.ndarray,
                r_next: Optional[float], a_now: Optional[np.ndarray]) -> GaussianBelief:
    """Predict through the transition, then update on the stacked (o, r_next)"""
    prior = predict(params, belief, a_prev)
    return update(params, prior, o=o, r_next=r_next, a_now=a_now)


def asr_belief(belief: GaussianBelief, asr: Iterable[int]) -> GaussianBelief:
    idx = sorted(asr)
    if any(i < 0 or i >= belief.dim for i in idx):
        raise ModelValidationError(f"ASR indices {idx} out of range for a {belief.dim}-dim belief")
    idx = np.asarray(idx, dtype=int)
    return GaussianBelief(belief.mean[idx], belief.cov[np.ix_(idx, idx)])


@dataclass(frozen=True)
class FilterResult:
    predicted: List[GaussianBelief]  # prior over s_t before o_t
    decision: List[GaussianBelief]   # after o_t
    filtered: List[GaussianBelief]   # after o_t and r_{t+1}


def _check_dims(params: LinearModelParams, traj: Trajectory):
    if traj.d_o != params.d_o or (traj.T > 1 and traj.d_a != params.d_a):
        raise ModelValidationError(
            f"trajectory dims (d_o={traj.d_o}, d_a={traj.d_a}) do not match model "
            f"(d_o={params.d_o}, d_a={params.d_a})"
        )


def filter_trajectory(params: LinearModelParams, traj: Trajectory) -> FilterResult:
    _check_dims(params, traj)
    predicted, decision, filtered = [], [], []
    belief = filter_init(params)
    for t in range(traj.T):
        if t > 0:
            belief = predict(params, filtered[-1], traj.actions[t - 1])
        predicted.append(belief)
        at_decision = update(params, belief, o=traj.observations[t])
        decision.append(at_decision)
        if t < traj.T - 1:
            filtered.append(update(params, at_decision, r_next=traj.rewards[t], a_now=traj.actions[t]))
        else:
            filtered.append(at_decision)
    return FilterResult(predicted=predicted, decision=decision, filtered=filtered)


def smooth(params: LinearModelParams, traj: Trajectory) -> List[GaussianBelief]:
    """Rauch-Tung-Striebel backward pass over the reward-refined filter"""
    fr = filter_trajectory(params, traj)
    A = params.C_s.T
    out = [fr.filtered[-1]]
    for t in range(traj.T - 2, -1, -1):
        filt = fr.filtered[t]
        prior_next = fr.predicted[t + 1]
        J = np.linalg.solve(prior_next.cov, A @ filt.cov).T
        nxt = out[0]
        mean = filt.mean + J @ (nxt.mean - prior_next.mean)
        cov = filt.cov + J @ (nxt.cov - prior_next.cov) @ J.T
        out.insert(0, GaussianBelief(mean, _sym(cov)))
    logger.debug(f"Smoothed {traj.T} steps")
    return out


def dense_posterior(params: LinearModelParams, traj: Trajectory) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior of s_{1:T} by conditioning the full joint Gaussian; O((T d_s)^3), for small T"""
    _check_dims(params, traj)
    T, d = traj.T, params.d_s
    A = params.C_s.T
    # s = m + Phi w, with w = [s_1; η_2 .. η_T]
    Phi = np.zeros((T * d, T * d))
    m = np.zeros(T * d)
    Pw = np.eye(T * d)
    Pw[:d, :d] = stationary_state_cov(params)
    for t in range(T):
        for k in range(t + 1):
            Phi[t * d:(t + 1) * d, k * d:(k + 1) * d] = np.linalg.matrix_power(A, t - k)
        if t > 0:
            m[t * d:(t + 1) * d] = A @ m[(t - 1) * d:t * d] + params.C_a_to_s.T @ traj.actions[t - 1]
    prior_cov = Phi @ Pw @ Phi.T

    H_rows, y, noise = [], [], []
    for t in range(T):
        sel = np.zeros((params.d_o, T * d))
        sel[:, t * d:(t + 1) * d] = params.C_s_to_o.T
        H_rows.append(sel)
        y.append(traj.observations[t])
        noise.append(params.cov_e)
        if t < T - 1:
            row = np.zeros((1, T * d))
            row[0, t * d:(t + 1) * d] = params.C_s_to_r
            H_rows.append(row)
            y.append(np.atleast_1d(traj.rewards[t] - params.C_a_to_r @ traj.actions[t]))
            noise.append(np.array([[params.var_eps]]))
    H = np.vstack(H_rows)
    y = np.concatenate(y)
    R = block_diag(*noise)

    S = H @ prior_cov @ H.T + R
    K = np.linalg.solve(S, H @ prior_cov).T
    post_mean = m + K @ (y - H @ m)
    post_cov = prior_cov - K @ H @ prior_cov
    means = post_mean.reshape(T, d)
    covs = np.stack([_sym(post_cov[t * d:(t + 1) * d, t * d:(t + 1) * d]) for t in range(T)])
    return means, covs
