"""Linear-Gaussian environment model, trajectory simulation and population moments.

State recursion and emissions (the record at step t stores o_t, a_t, r_{t+1}):

    s_t     = C_sᵀ s_{t-1} + C_a_to_sᵀ a_{t-1} + η_t,   η_t ~ N(0, I)
    o_t     = C_s_to_oᵀ s_t + e_t,                       e_t ~ N(0, cov_e)
    r_{t+1} = C_s_to_rᵀ s_t + C_a_to_rᵀ a_t + ε_t,        ε_t ~ N(0, var_eps)

The stacked observation y := [o_t; r_{t+1}] has loading L = [C_s_to_o | C_s_to_r]
on s_t and loading B = [0 | C_a_to_r] on a_t.
"""

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy import linalg

from .errors import ModelValidationError

Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _frozen(x: Any, shape: tuple, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.shape != shape:
        raise ModelValidationError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelValidationError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Factor F with F Fᵀ = cov, valid for singular PSD matrices"""
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True, eq=False)
class LinearModelParams:
    C_s_to_o: np.ndarray
    C_s_to_r: np.ndarray
    C_a_to_r: np.ndarray
    C_s: np.ndarray
    C_a_to_s: np.ndarray
    cov_e: np.ndarray
    var_eps: float
    cov_a: np.ndarray

    def __post_init__(self):
        C_s_to_o = np.asarray(self.C_s_to_o, dtype=float)
        C_a_to_s = np.asarray(self.C_a_to_s, dtype=float)
        if C_s_to_o.ndim != 2 or C_a_to_s.ndim != 2:
            raise ModelValidationError("C_s_to_o and C_a_to_s must be matrices")
        d_s, d_o = C_s_to_o.shape
        d_a = C_a_to_s.shape[0]
        object.__setattr__(self, "C_s_to_o", _frozen(C_s_to_o, (d_s, d_o), "C_s_to_o"))
        object.__setattr__(self, "C_s_to_r", _frozen(self.C_s_to_r, (d_s,), "C_s_to_r"))
        object.__setattr__(self, "C_a_to_r", _frozen(self.C_a_to_r, (d_a,), "C_a_to_r"))
        object.__setattr__(self, "C_s", _frozen(self.C_s, (d_s, d_s), "C_s"))
        object.__setattr__(self, "C_a_to_s", _frozen(C_a_to_s, (d_a, d_s), "C_a_to_s"))
        object.__setattr__(self, "cov_e", _frozen(self.cov_e, (d_o, d_o), "cov_e"))
        object.__setattr__(self, "cov_a", _frozen(self.cov_a, (d_a, d_a), "cov_a"))
        object.__setattr__(self, "var_eps", float(self.var_eps))

        if self.var_eps < 0:
            raise ModelValidationError(f"var_eps must be nonnegative, got {self.var_eps}")
        if not np.allclose(self.cov_e, self.cov_e.T, atol=1e-10) or np.linalg.eigvalsh(self.cov_e).min() < -1e-10:
            raise ModelValidationError("cov_e must be symmetric PSD")
        if not np.allclose(self.cov_a, self.cov_a.T, atol=1e-10) or np.linalg.eigvalsh(self.cov_a).min() <= 0:
            raise ModelValidationError("cov_a must be symmetric PD")

    @property
    def d_s(self) -> int:
        return self.C_s.shape[0]

    @property
    def d_o(self) -> int:
        return self.C_s_to_o.shape[1]

    @property
    def d_a(self) -> int:
        return self.C_a_to_s.shape[0]

    @property
    def p(self) -> int:
        """Dimension of the stacked observation [o; r]"""
        return self.d_o + 1

    @property
    def stacked_loading(self) -> np.ndarray:
        return np.column_stack([self.C_s_to_o, self.C_s_to_r])

    @property
    def action_loading(self) -> np.ndarray:
        return np.column_stack([np.zeros((self.d_a, self.d_o)), self.C_a_to_r])

    @property
    def stacked_noise_cov(self) -> np.ndarray:
        return linalg.block_diag(self.cov_e, [[self.var_eps]])

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.C_s))))

    def is_stationary(self) -> bool:
        return self.spectral_radius < 1.0

    def require_stationary(self):
        if not self.is_stationary():
            raise ModelValidationError(
                f"transition is not stable: spectral radius {self.spectral_radius:.4f} >= 1"
            )

    def rotate(self, U: np.ndarray) -> "LinearModelParams":
        """Observationally equivalent model in the basis s' = Uᵀ s"""
        U = np.asarray(U, dtype=float)
        if U.shape != (self.d_s, self.d_s) or not np.allclose(U.T @ U, np.eye(self.d_s), atol=1e-10):
            raise ModelValidationError("rotation must be an orthogonal d_s x d_s matrix")
        return replace(
            self,
            C_s_to_o=U.T @ self.C_s_to_o,
            C_s_to_r=U.T @ self.C_s_to_r,
            C_s=U.T @ self.C_s @ U,
            C_a_to_s=self.C_a_to_s @ U,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LinearModelParams):
            return NotImplemented
        return all(np.array_equal(np.asarray(getattr(self, f)), np.asarray(getattr(other, f))) for f in _FIELDS)

    def to_dict(self) -> Dict[str, Any]:
        return {f: (getattr(self, f).tolist() if f != "var_eps" else self.var_eps) for f in _FIELDS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LinearModelParams":
        return cls(**{f: data[f] for f in _FIELDS})


_FIELDS = ("C_s_to_o", "C_s_to_r", "C_a_to_r", "C_s", "C_a_to_s", "cov_e", "var_eps", "cov_a")


def stationary_state_cov(params: LinearModelParams) -> np.ndarray:
    """Solution P of P = C_sᵀ P C_s + C_a_to_sᵀ cov_a C_a_to_s + I"""
    params.require_stationary()
    Q = params.C_a_to_s.T @ params.cov_a @ params.C_a_to_s + np.eye(params.d_s)
    P = linalg.solve_discrete_lyapunov(params.C_s.T, Q)
    return 0.5 * (P + P.T)


def _action_state_cov(params: LinearModelParams, k: int) -> np.ndarray:
    """S_k = Lᵀ A^{k-1} G cov_a with A = C_sᵀ, G = C_a_to_sᵀ"""
    A = params.C_s.T
    return params.stacked_loading.T @ np.linalg.matrix_power(A, k - 1) @ params.C_a_to_s.T @ params.cov_a


def cross_cov_ya(params: LinearModelParams, k: int) -> np.ndarray:
    """Cov(y_{t+k}, a_t), shape (d_o+1) x d_a"""
    if k < 0:
        raise ModelValidationError(f"lag must be nonnegative, got {k}")
    params.require_stationary()
    if k == 0:
        return params.action_loading.T @ params.cov_a
    return _action_state_cov(params, k)


def autocov_y(params: LinearModelParams, k: int) -> np.ndarray:
    """R_y(k) = E[y_t y_{t+k}ᵀ] for the stacked observation"""
    if k < 0:
        raise ModelValidationError(f"lag must be nonnegative, got {k}")
    P = stationary_state_cov(params)
    L = params.stacked_loading
    B = params.action_loading
    if k == 0:
        R = L.T @ P @ L + B.T @ params.cov_a @ B + params.stacked_noise_cov
        return 0.5 * (R + R.T)
    A = params.C_s.T
    return L.T @ P @ np.linalg.matrix_power(A.T, k) @ L + B.T @ _action_state_cov(params, k).T


def observation_transition(params: LinearModelParams) -> np.ndarray:
    """Ω = Lᵀ A (Lᵀ)⁺, the transition seen through the stacked loading"""
    L = params.stacked_loading
    return L.T @ params.C_s.T @ np.linalg.pinv(L.T)


@dataclass(frozen=True, eq=False)
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    latents: Optional[np.ndarray] = None
    iid_actions: bool = True

    def __post_init__(self):
        obs = np.atleast_2d(np.asarray(self.observations, dtype=float))
        T = obs.shape[0]
        acts = np.asarray(self.actions, dtype=float)
        if acts.ndim != 2:
            acts = acts.reshape(T - 1, -1) if acts.size else np.zeros((0, 1))
        rews = np.asarray(self.rewards, dtype=float).reshape(-1)
        if acts.shape[0] != T - 1 or rews.shape[0] != T - 1:
            raise ModelValidationError(
                f"inconsistent lengths: {T} observations, {acts.shape[0]} actions, {rews.shape[0]} rewards"
            )
        for arr in (obs, acts, rews):
            arr.flags.writeable = False
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "rewards", rews)
        if self.latents is not None:
            lat = np.atleast_2d(np.asarray(self.latents, dtype=float))
            if lat.shape[0] != T:
                raise ModelValidationError("latents must have one row per observation")
            lat.flags.writeable = False
            object.__setattr__(self, "latents", lat)

    @property
    def T(self) -> int:
        return self.observations.shape[0]

    @property
    def d_o(self) -> int:
        return self.observations.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]

    def to_records(self, episode: int = 0) -> List[Dict[str, Any]]:
        records = []
        for t in range(self.T):
            full = t < self.T - 1
            records.append({
                "episode": episode,
                "t": t + 1,
                "o": self.observations[t].tolist(),
                "a": self.actions[t].tolist() if full else None,
                "r": float(self.rewards[t]) if full else None,
            })
        return records


@dataclass(frozen=True)
class TrajectoryBatch:
    episodes: Tuple[Trajectory, ...]

    def __post_init__(self):
        episodes = tuple(self.episodes)
        if not episodes:
            raise ModelValidationError("a batch needs at least one episode")
        dims = {(ep.d_o, ep.d_a) for ep in episodes}
        if len(dims) != 1:
            raise ModelValidationError(f"episodes disagree on dimensions: {sorted(dims)}")
        object.__setattr__(self, "episodes", episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    @property
    def d_o(self) -> int:
        return self.episodes[0].d_o

    @property
    def d_a(self) -> int:
        return self.episodes[0].d_a

    @property
    def iid_actions(self) -> bool:
        return all(ep.iid_actions for ep in self.episodes)

    def to_records(self) -> List[Dict[str, Any]]:
        return [rec for e, ep in enumerate(self.episodes) for rec in ep.to_records(e)]

    @classmethod
    def from_records(cls, records: Sequence[Dict[str, Any]]) -> "TrajectoryBatch":
        grouped: Dict[int, List[Dict[str, Any]]] = {}
        for rec in records:
            grouped.setdefault(int(rec.get("episode", 0)), []).append(rec)
        episodes = []
        for e in sorted(grouped):
            steps = sorted(grouped[e], key=lambda r: r["t"])
            body = steps[:-1]
            episodes.append(Trajectory(
                observations=[s["o"] for s in steps],
                actions=[s["a"] for s in body],
                rewards=[s["r"] for s in body],
            ))
        return cls(tuple(episodes))


class LinearPOMDPEnv:
    """Step-wise environment; agents only ever receive (reward, observation)"""

    def __init__(self, params: LinearModelParams, rng: Union[np.random.Generator, int]):
        params.require_stationary()
        self.params = params
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._init_factor = psd_sqrt(stationary_state_cov(params))
        self._obs_factor = psd_sqrt(params.cov_e)
        self._state: Optional[np.ndarray] = None

    @property
    def d_o(self) -> int:
        return self.params.d_o

    @property
    def d_a(self) -> int:
        return self.params.d_a

    def _emit(self) -> np.ndarray:
        p = self.params
        return p.C_s_to_o.T @ self._state + self._obs_factor @ self.rng.standard_normal(p.d_o)

    def reset(self) -> np.ndarray:
        self._state = self._init_factor @ self.rng.standard_normal(self.params.d_s)
        return self._emit()

    def step(self, a: np.ndarray) -> Tuple[float, np.ndarray]:
        if self._state is None:
            raise ModelValidationError("reset() must be called before step()")
        p = self.params
        a = np.asarray(a, dtype=float).reshape(p.d_a)
        r = float(p.C_s_to_r @ self._state + p.C_a_to_r @ a + np.sqrt(p.var_eps) * self.rng.standard_normal())
        self._state = p.C_s.T @ self._state + p.C_a_to_s.T @ a + self.rng.standard_normal(p.d_s)
        return r, self._emit()


def simulate(params: LinearModelParams, T: int, seed: int, policy: Optional[Policy] = None) -> Trajectory:
    """Roll the model forward T steps from the stationary distribution"""
    if T < 3:
        raise ModelValidationError(f"T must be at least 3, got {T}")
    rng = np.random.default_rng(seed)
    env = LinearPOMDPEnv(params, rng)
    act_factor = psd_sqrt(params.cov_a)

    obs = np.empty((T, params.d_o))
    latents = np.empty((T, params.d_s))
    acts = np.empty((T - 1, params.d_a))
    rews = np.empty(T - 1)

    obs[0] = env.reset()
    latents[0] = env._state
    for t in range(T - 1):
        if policy is None:
            acts[t] = act_factor @ rng.standard_normal(params.d_a)
        else:
            acts[t] = np.asarray(policy(obs[t], rng), dtype=float).reshape(params.d_a)
        rews[t], obs[t + 1] = env.step(acts[t])
        latents[t + 1] = env._state
    return Trajectory(obs, acts, rews, latents=latents, iid_actions=policy is None)


def simulate_batch(params: LinearModelParams, episodes: int, T: int, seed: int) -> TrajectoryBatch:
    """Independent episodes with child seeds spawned from one SeedSequence"""
    if episodes < 1:
        raise ModelValidationError(f"episodes must be positive, got {episodes}")
    children = np.random.SeedSequence(seed).spawn(episodes)
    batch = TrajectoryBatch(tuple(
        simulate(params, T, int(child.generate_state(1)[0])) for child in children
    ))
    logger.info(f"Simulated {episodes} episodes of length {T} (seed={seed})")
    return batch
