"""Model-free and Dyna-style Q-learning on ASR beliefs.

The agent talks to the environment only through reset() and step(a), which return
observations and rewards. Beliefs come from the Kalman filter under the learned
parameters; the Q function is linear in polynomial features of the ASR belief.
"""

from collections import deque
from dataclasses import dataclass, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from sklearn.linear_model import LinearRegression
from sklearn.preprocessing import PolynomialFeatures

from .belief_inference import GaussianBelief, asr_belief, filter_init, predict, update
from .errors import DivergenceError, ModelValidationError
from .linear_env import LinearModelParams, LinearPOMDPEnv


@dataclass(frozen=True)
class PolicyConfig:
    action_set: Tuple[Tuple[float, ...], ...] = ((-1.0,), (1.0,))
    episodes: int = 50
    horizon: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: float = 0.9
    lr: float = 0.01
    gamma: float = 0.9
    replay_capacity: int = 10000
    minibatch: int = 32
    n_planning: int = 0
    model_refresh_every: int = 1
    feature_degree: int = 1
    include_bias: bool = True
    include_variance: bool = False
    sample_asr: bool = False
    q_limit: float = 1e6

    def __post_init__(self):
        actions = tuple(tuple(float(x) for x in np.atleast_1d(a)) for a in self.action_set)
        if not actions:
            raise ModelValidationError("action_set must not be empty")
        if len({len(a) for a in actions}) != 1:
            raise ModelValidationError("all actions must have the same dimension")
        object.__setattr__(self, "action_set", actions)
        if self.episodes < 0 or self.horizon < 2:
            raise ModelValidationError("episodes >= 0 and horizon >= 2 required")
        if self.n_planning < 0:
            raise ModelValidationError(f"n_planning must be nonnegative, got {self.n_planning}")
        if not 0.0 <= self.gamma < 1.0:
            raise ModelValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.feature_degree not in (1, 2):
            raise ModelValidationError("feature_degree must be 1 or 2")
        if self.minibatch < 1 or self.replay_capacity < self.minibatch:
            raise ModelValidationError("replay_capacity must be at least the minibatch size")

    @property
    def actions(self) -> np.ndarray:
        return np.asarray(self.action_set, dtype=float)

    def epsilon(self, progress: float) -> float:
        """Exploration rate after `progress` episodes' worth of Q updates"""
        return max(self.epsilon_end, self.epsilon_start * self.epsilon_decay ** progress)


@dataclass(frozen=True)
class TransitionRecord:
    s_asr: np.ndarray
    action: int
    reward: float
    next_s_asr: np.ndarray
    done: bool
    s_full: Optional[np.ndarray] = None
    var_asr: Optional[np.ndarray] = None
    next_var_asr: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (np.all(np.isfinite(self.s_asr)) and np.all(np.isfinite(self.next_s_asr)) and np.isfinite(self.reward)):
            raise ModelValidationError("transition entries must be finite")


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, record: TransitionRecord):
        self._items.append(record)

    def sample(self, rng: np.random.Generator, n: int) -> List[TransitionRecord]:
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]

    def records(self) -> List[TransitionRecord]:
        return list(self._items)


class LinearQFunction:
    """One weight vector per discrete action over polynomial belief features"""

    def __init__(self, input_dim: int, n_actions: int, degree: int = 2, include_bias: bool = True):
        self.input_dim = input_dim
        self.n_actions = n_actions
        self.poly = PolynomialFeatures(degree=degree, include_bias=include_bias).fit(np.zeros((1, input_dim)))
        self.weights = np.zeros((n_actions, self.poly.n_output_features_))

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.poly.transform(np.asarray(X, dtype=float).reshape(-1, self.input_dim))

    def values(self, X: np.ndarray) -> np.ndarray:
        return self.features(X) @ self.weights.T

    def select(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> int:
        return int(np.argmax(self.values(x)[0]))

    def update(self, X: np.ndarray, actions: np.ndarray, targets: np.ndarray, lr: float) -> float:
        """Semi-gradient step on the squared TD error; returns the max |Q| after the step"""
        phi = self.features(X)
        q = np.einsum("nf,nf->n", phi, self.weights[actions])
        delta = targets - q
        grad = np.zeros_like(self.weights)
        np.add.at(grad, actions, delta[:, None] * phi)
        self.weights += lr * grad / len(actions)
        return float(np.max(np.abs(self.values(X))))


class RandomPolicy:
    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def select(self, x: np.ndarray, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_actions))


class FixedActionPolicy:
    def __init__(self, index: int):
        self.index = index

    def select(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> int:
        return self.index


def oracle_action(params: LinearModelParams, action_set: Sequence[Sequence[float]], gamma: float) -> int:
    """Best action under the true model.

    Action effects enter linearly and independently of the state, so the discounted
    value of action a is a·w with w = C_a_to_r + γ C_a_to_s (I - γ C_s)⁻¹ C_s_to_r.
    """
    w = params.C_a_to_r + gamma * params.C_a_to_s @ np.linalg.solve(
        np.eye(params.d_s) - gamma * params.C_s, params.C_s_to_r)
    return int(np.argmax(np.asarray(action_set, dtype=float) @ w))


def imagine_step(params: LinearModelParams, asr: Iterable[int], s_asr: np.ndarray, s_full_proxy: np.ndarray,
                 a: np.ndarray, rng: np.random.Generator, noise_scale: float = 1.0) -> Tuple[np.ndarray, float]:
    """Draw (next ASR state, reward) from the model with the ASR entries of the proxy replaced"""
    idx = np.asarray(sorted(asr), dtype=int)
    s = np.array(s_full_proxy, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    if s.size != params.d_s or a.size != params.d_a or np.asarray(s_asr).size != idx.size:
        raise ModelValidationError("imagine_step input dimensions do not match the model")
    s[idx] = np.asarray(s_asr, dtype=float).reshape(-1)
    mean_next = params.C_s.T @ s + params.C_a_to_s.T @ a
    next_asr = mean_next[idx] + noise_scale * rng.standard_normal(idx.size)
    r = float(params.C_s_to_r @ s + params.C_a_to_r @ a + np.sqrt(params.var_eps) * rng.standard_normal())
    return next_asr, r


def refit_model(buffer: ReplayBuffer, params: LinearModelParams, asr: Iterable[int],
                action_set: Sequence[Sequence[float]]) -> Tuple[LinearModelParams, float]:
    """Re-estimate the ASR block of the transition and reward from stored transitions.

    Returns the updated parameters and the transition noise scale in belief space; the
    previous model is kept when the refit is unstable or the buffer too small.
    """
    idx = np.asarray(sorted(asr), dtype=int)
    k = idx.size
    records = buffer.records()
    actions = np.asarray(action_set, dtype=float)
    if len(records) < 2 * (k + params.d_a + 1):
        return params, 1.0
    S = np.stack([r.s_asr for r in records])
    A = actions[[r.action for r in records]]
    X = np.hstack([S, A])
    S_next = np.stack([r.next_s_asr for r in records])
    rewards = np.array([r.reward for r in records])

    trans = LinearRegression(fit_intercept=False).fit(X, S_next)
    rew = LinearRegression(fit_intercept=False).fit(X, rewards)
    C_s = np.array(params.C_s)
    C_s[:, idx] = 0.0
    C_s[np.ix_(idx, idx)] = trans.coef_[:, :k].T
    C_a_to_s = np.array(params.C_a_to_s)
    C_a_to_s[:, idx] = trans.coef_[:, k:].T
    C_s_to_r = np.zeros(params.d_s)
    C_s_to_r[idx] = rew.coef_[:k]
    trans_resid = S_next - trans.predict(X)
    rew_resid = rewards - rew.predict(X)
    refit = replace(params, C_s=C_s, C_a_to_s=C_a_to_s, C_s_to_r=C_s_to_r,
                    C_a_to_r=rew.coef_[k:], var_eps=float(np.mean(rew_resid ** 2)))
    if not refit.is_stationary():
        logger.warning("Refit transition is unstable; keeping the previous planning model")
        return params, 1.0
    return refit, float(np.sqrt(np.mean(trans_resid ** 2)))


def _features(belief: GaussianBelief, asr: Sequence[int], cfg: PolicyConfig,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Q input vector, ASR mean or sample, ASR variance diagonal)"""
    marginal = asr_belief(belief, asr)
    s = marginal.sample(rng) if cfg.sample_asr else marginal.mean
    var = np.diag(marginal.cov).copy()
    x = np.concatenate([s, var]) if cfg.include_variance else s
    return x, s, var


def _q_input(s: np.ndarray, var: Optional[np.ndarray], cfg: PolicyConfig) -> np.ndarray:
    return np.concatenate([s, var]) if cfg.include_variance else s


@dataclass
class LearningResult:
    curve: pd.DataFrame
    q: LinearQFunction
    planning_model: LinearModelParams
    noise_scale: float


def _check_inputs(model_params: LinearModelParams, asr: Iterable[int], cfg: PolicyConfig) -> List[int]:
    asr = sorted(asr)
    if not asr:
        raise ModelValidationError("policy learning needs a nonempty ASR set")
    if any(i < 0 or i >= model_params.d_s for i in asr):
        raise ModelValidationError(f"ASR indices {asr} out of range for d_s={model_params.d_s}")
    if cfg.actions.shape[1] != model_params.d_a:
        raise ModelValidationError(f"actions have dimension {cfg.actions.shape[1]}, model expects {model_params.d_a}")
    model_params.require_stationary()
    return asr


def _q_targets(q: LinearQFunction, batch: List[TransitionRecord], cfg: PolicyConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([_q_input(r.s_asr, r.var_asr, cfg) for r in batch])
    X_next = np.stack([_q_input(r.next_s_asr, r.var_asr if r.next_var_asr is None else r.next_var_asr, cfg)
                       for r in batch])
    actions = np.array([r.action for r in batch])
    bootstrap = np.array([0.0 if r.done else 1.0 for r in batch])
    targets = np.array([r.reward for r in batch]) + cfg.gamma * bootstrap * q.values(X_next).max(axis=1)
    return X, actions, targets


def _run(env_params: LinearModelParams, model_params: LinearModelParams, asr: Iterable[int], cfg: PolicyConfig,
         seed: int, n_planning: int) -> LearningResult:
    asr = _check_inputs(model_params, asr, cfg)
    env_rng, explore_rng, replay_rng, plan_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)
    ]
    env = LinearPOMDPEnv(env_params, env_rng)
    actions = cfg.actions
    input_dim = len(asr) * (2 if cfg.include_variance else 1)
    q = LinearQFunction(input_dim, len(actions), cfg.feature_degree, cfg.include_bias)
    buffer = ReplayBuffer(cfg.replay_capacity)
    planning_model, noise_scale = model_params, 1.0

    rows: List[Dict[str, Any]] = []
    real_steps = 0
    # exploration decays with Q updates, real and imagined, counted in episodes of `horizon` updates
    updates = 0
    for episode in range(cfg.episodes):
        eps = cfg.epsilon(updates / cfg.horizon)
        belief = update(model_params, filter_init(model_params), o=env.reset())
        x, s, var = _features(belief, asr, cfg, explore_rng)
        total = 0.0
        for t in range(cfg.horizon):
            if explore_rng.random() < cfg.epsilon(updates / cfg.horizon):
                a_idx = int(explore_rng.integers(len(actions)))
            else:
                a_idx = q.select(x)
            r, o = env.step(actions[a_idx])
            real_steps += 1
            total += r
            refined = update(model_params, belief, r_next=r, a_now=actions[a_idx])
            next_belief = update(model_params, predict(model_params, refined, actions[a_idx]), o=o)
            x_next, s_next, var_next = _features(next_belief, asr, cfg, explore_rng)
            buffer.add(TransitionRecord(s_asr=s, action=a_idx, reward=r, next_s_asr=s_next,
                                        done=t == cfg.horizon - 1, s_full=belief.mean, var_asr=var,
                                        next_var_asr=var_next))

            X, acts, targets = _q_targets(q, buffer.sample(replay_rng, cfg.minibatch), cfg)
            q_max = q.update(X, acts, targets, cfg.lr)
            updates += 1
            if q_max > cfg.q_limit:
                raise DivergenceError(f"Q values exceeded {cfg.q_limit:g}", real_steps)

            if n_planning > 0:
                if plan(q, buffer, planning_model, asr, cfg, plan_rng, n_planning, noise_scale) > cfg.q_limit:
                    raise DivergenceError(f"Q values exceeded {cfg.q_limit:g} during planning", real_steps)
                updates += n_planning

            belief, x, s, var = next_belief, x_next, s_next, var_next

        if n_planning > 0 and cfg.model_refresh_every > 0 and (episode + 1) % cfg.model_refresh_every == 0:
            planning_model, noise_scale = refit_model(buffer, planning_model, asr, cfg.action_set)
        rows.append({"episode": episode, "return": total, "epsilon": eps, "real_steps": real_steps})
        logger.debug(f"episode {episode}: return={total:.3f} epsilon={eps:.3f}")

    curve = pd.DataFrame(rows, columns=["episode", "return", "epsilon", "real_steps"])
    logger.info(f"Policy learning finished: {cfg.episodes} episodes, {real_steps} real steps, n={n_planning}")
    return LearningResult(curve=curve, q=q, planning_model=planning_model, noise_scale=noise_scale)


def run_model_free(env_params: LinearModelParams, model_params: LinearModelParams, asr: Iterable[int],
                   cfg: PolicyConfig, seed: int) -> LearningResult:
    return _run(env_params, model_params, asr, cfg, seed, n_planning=0)


def run_dyna(env_params: LinearModelParams, model_params: LinearModelParams, asr: Iterable[int],
             cfg: PolicyConfig, seed: int) -> LearningResult:
    return _run(env_params, model_params, asr, cfg, seed, n_planning=cfg.n_planning)


def plan(q: LinearQFunction, buffer: ReplayBuffer, params: LinearModelParams, asr: Iterable[int],
         cfg: PolicyConfig, rng: np.random.Generator, steps: int, noise_scale: float = 1.0) -> float:
    """Imagined Q updates from stored (s, a) pairs; returns the largest |Q| seen"""
    asr = sorted(asr)
    actions = cfg.actions
    q_max = 0.0
    for _ in range(steps):
        rec = buffer.sample(rng, 1)[0]
        proxy = rec.s_full if rec.s_full is not None else np.zeros(params.d_s)
        s_img, r_img = imagine_step(params, asr, rec.s_asr, proxy, actions[rec.action], rng, noise_scale)
        img = TransitionRecord(s_asr=rec.s_asr, action=rec.action, reward=r_img, next_s_asr=s_img,
                               done=False, var_asr=rec.var_asr, next_var_asr=rec.next_var_asr)
        X, acts, targets = _q_targets(q, [img], cfg)
        q_max = max(q_max, q.update(X, acts, targets, cfg.lr))
    return q_max


@dataclass(frozen=True)
class EvaluationResult:
    mean: float
    stderr: float
    returns: Tuple[float, ...]


def evaluate(policy: Any, env_params: LinearModelParams, model_params: LinearModelParams, asr: Iterable[int],
             cfg: PolicyConfig, episodes: int, seed: int) -> EvaluationResult:
    """Greedy rollouts of `policy` (anything with select(x, rng)); returns mean and standard error"""
    asr = _check_inputs(model_params, asr, cfg)
    if episodes < 1:
        raise ModelValidationError("evaluation needs at least one episode")
    env_rng, act_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    env = LinearPOMDPEnv(env_params, env_rng)
    actions = cfg.actions
    returns = []
    for _ in range(episodes):
        belief = update(model_params, filter_init(model_params), o=env.reset())
        total = 0.0
        for _t in range(cfg.horizon):
            x, _s, _v = _features(belief, asr, cfg, act_rng)
            a_idx = policy.select(x, act_rng)
            r, o = env.step(actions[a_idx])
            total += r
            refined = update(model_params, belief, r_next=r, a_now=actions[a_idx])
            belief = update(model_params, predict(model_params, refined, actions[a_idx]), o=o)
        returns.append(total)
    arr = np.asarray(returns)
    stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return EvaluationResult(mean=float(arr.mean()), stderr=stderr, returns=tuple(returns))


def run_random_policy(env_params: LinearModelParams, cfg: PolicyConfig, seed: int) -> pd.DataFrame:
    """Learning-curve-shaped returns of uniformly random actions, for baselines"""
    rng = np.random.default_rng(seed)
    env = LinearPOMDPEnv(env_params, rng)
    actions = cfg.actions
    rows = []
    for episode in range(cfg.episodes):
        env.reset()
        total = sum(env.step(actions[int(rng.integers(len(actions)))])[0] for _ in range(cfg.horizon))
        rows.append({"episode": episode, "return": total, "epsilon": 1.0, "real_steps": (episode + 1) * cfg.horizon})
    return pd.DataFrame(rows, columns=["episode", "return", "epsilon", "real_steps"])


def steps_to_fraction(curve: pd.DataFrame, frac: float = 0.9, window: int = 5) -> Optional[int]:
    """Real steps until the smoothed return first covers `frac` of its improvement from the
    first episode to the asymptote (mean of the last 20% of episodes); None if never"""
    if curve.empty:
        return None
    smoothed = curve["return"].rolling(window, min_periods=1).mean().to_numpy()
    tail = max(1, len(curve) // 5)
    asymptote = float(curve["return"].iloc[-tail:].mean())
    start = float(smoothed[0])
    threshold = start + frac * (asymptote - start)
    hit = np.nonzero(smoothed >= threshold)[0] if asymptote >= start else np.nonzero(smoothed <= threshold)[0]
    if hit.size == 0:
        return None
    return int(curve["real_steps"].iloc[int(hit[0])])


def greedy_agreement(q: LinearQFunction, buffer_or_states: Any, target_index: int,
                     cfg: Optional[PolicyConfig] = None) -> float:
    """Fraction of decision states where the greedy action equals `target_index`"""
    if isinstance(buffer_or_states, ReplayBuffer):
        states = np.stack([_q_input(r.s_asr, r.var_asr, cfg or PolicyConfig()) for r in buffer_or_states.records()])
    else:
        states = np.asarray(buffer_or_states, dtype=float)
    choices = np.argmax(q.values(states), axis=1)
    return float(np.mean(choices == target_index))
