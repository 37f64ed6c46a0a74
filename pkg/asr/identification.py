"""Moment-based identification of the linear model up to an orthogonal rotation.

All quantities live in the stacked observation space of y_t = [o_t; r_{t+1}]
(dimension p = d_o + 1). Chain of recoveries:

    C_ya(0)            -> C_a_to_r
    C_ya(k), k >= 1    -> S_k = Lᵀ A^{k-1} G cov_a
    R_y(k), S_k        -> Ω                (stacked least squares over k = 2..k_max)
    R_y(0), R_y(1), Ω  -> Σ_ë and M = Lᵀ(G cov_a Gᵀ + I)L
    M, S_1             -> gram = LᵀL
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import linalg

from .errors import IdentifiabilityError, ModelValidationError
from .linear_env import (
    LinearModelParams,
    TrajectoryBatch,
    autocov_y,
    cross_cov_ya,
    observation_transition,
)

MAX_CONDITION = 1e10


@dataclass(frozen=True)
class MomentSummary:
    R_y: List[np.ndarray]
    C_ya: List[np.ndarray]
    var_a: np.ndarray
    n_samples: int

    @property
    def K(self) -> int:
        return len(self.R_y) - 1

    @property
    def p(self) -> int:
        return self.R_y[0].shape[0]


@dataclass(frozen=True)
class ActionEffects:
    C_a_to_r_hat: np.ndarray
    S_hat: List[np.ndarray]  # S_hat[k - 1] is S_k
    o_block_residual: float

    def S(self, k: int) -> np.ndarray:
        return self.S_hat[k - 1]

    def loading_T(self, p: int) -> np.ndarray:
        """p x d_a transpose of the action loading [0 | C_a_to_r]"""
        Bt = np.zeros((p, self.C_a_to_r_hat.shape[0]))
        Bt[-1] = self.C_a_to_r_hat
        return Bt


@dataclass(frozen=True)
class OmegaEstimate:
    omega: np.ndarray
    rank: int
    condition: float
    residual: float


@dataclass(frozen=True)
class NoiseGram:
    cov_e_hat: np.ndarray
    gram_hat: np.ndarray
    M_hat: np.ndarray
    residual: float
    min_gram_eig: float


@dataclass(frozen=True)
class IdentifiedParams:
    C_a_to_r_hat: np.ndarray
    S_hat: List[np.ndarray]
    omega_hat: np.ndarray
    cov_e_hat: np.ndarray
    gram_hat: np.ndarray
    M_hat: np.ndarray
    loading_hat: Optional[np.ndarray] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "C_a_to_r_hat": self.C_a_to_r_hat.tolist(),
            "S_hat": [S.tolist() for S in self.S_hat],
            "omega_hat": self.omega_hat.tolist(),
            "cov_e_hat": self.cov_e_hat.tolist(),
            "gram_hat": self.gram_hat.tolist(),
            "M_hat": self.M_hat.tolist(),
            "loading_hat": None if self.loading_hat is None else self.loading_hat.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IdentifiedParams":
        return cls(
            C_a_to_r_hat=np.asarray(data["C_a_to_r_hat"], dtype=float),
            S_hat=[np.asarray(S, dtype=float) for S in data["S_hat"]],
            omega_hat=np.asarray(data["omega_hat"], dtype=float),
            cov_e_hat=np.asarray(data["cov_e_hat"], dtype=float),
            gram_hat=np.asarray(data["gram_hat"], dtype=float),
            M_hat=np.asarray(data["M_hat"], dtype=float),
            loading_hat=None if data.get("loading_hat") is None else np.asarray(data["loading_hat"], dtype=float),
            diagnostics=dict(data.get("diagnostics", {})),
        )


def estimate_moments(batch: TrajectoryBatch, K: int) -> MomentSummary:
    """Sample moments after global mean removal; lags never cross episode boundaries"""
    if K < 1:
        raise ModelValidationError(f"K must be positive, got {K}")
    ys = [np.column_stack([ep.observations[:-1], ep.rewards]) for ep in batch]
    acts = [ep.actions for ep in batch]
    lengths = [y.shape[0] for y in ys]
    if K >= min(lengths):
        raise ModelValidationError(f"K={K} must be smaller than the shortest episode ({min(lengths)} records)")
    n_total = int(sum(lengths))
    p = ys[0].shape[1]
    if n_total < 10 * p * K:
        raise ModelValidationError(f"too few samples: {n_total} < 10*(d_o+1)*K = {10 * p * K}")

    y_mean = np.concatenate(ys).mean(axis=0)
    a_mean = np.concatenate(acts).mean(axis=0)
    ys = [y - y_mean for y in ys]
    acts = [a - a_mean for a in acts]

    R_y, C_ya = [], []
    for k in range(K + 1):
        count = sum(n - k for n in lengths)
        R = sum(y[: len(y) - k].T @ y[k:] for y in ys) / count
        C = sum(y[k:].T @ a[: len(a) - k] for y, a in zip(ys, acts)) / count
        R_y.append(0.5 * (R + R.T) if k == 0 else R)
        C_ya.append(C)
    var_a = sum(a.T @ a for a in acts) / n_total
    logger.debug(f"Estimated moments up to lag {K} from {n_total} records over {len(ys)} episodes")
    return MomentSummary(R_y=R_y, C_ya=C_ya, var_a=0.5 * (var_a + var_a.T), n_samples=n_total)


def population_moments(params: LinearModelParams, K: int) -> MomentSummary:
    """Exact moments of the stationary process"""
    return MomentSummary(
        R_y=[autocov_y(params, k) for k in range(K + 1)],
        C_ya=[cross_cov_ya(params, k) for k in range(K + 1)],
        var_a=np.array(params.cov_a),
        n_samples=0,
    )


def recover_action_effects(m: MomentSummary) -> ActionEffects:
    V = m.var_a
    w = np.linalg.eigvalsh(V)
    if w.min() <= 0 or w.max() / w.min() > MAX_CONDITION:
        raise IdentifiabilityError("action covariance is singular; actions must be excited in every dimension")
    C0 = m.C_ya[0]
    c_ar = np.linalg.solve(V, C0[-1])
    o_block = float(np.linalg.norm(C0[:-1]))
    if o_block > 0.1 * max(np.linalg.norm(C0), 1e-12) and o_block > 1e-8:
        logger.warning(f"Observation rows of Cov(y_t, a_t) are not near zero (norm {o_block:.3e})")
    return ActionEffects(C_a_to_r_hat=c_ar, S_hat=[np.array(C) for C in m.C_ya[1:]], o_block_residual=o_block)


def recover_omega(m: MomentSummary, eff: ActionEffects, k_max: int = 4,
                  d_state: Optional[int] = None) -> OmegaEstimate:
    """Stacked least squares for (R(k) - Bᵀ S_kᵀ) = (R(k-1) - Bᵀ S_{k-1}ᵀ) Ωᵀ"""
    k_max = min(k_max, m.K)
    if k_max < 2:
        raise ModelValidationError("recovering Ω needs moments up to lag 2 at least")
    p = m.p
    Bt = eff.loading_T(p)

    def corrected(k):
        return m.R_y[k] - Bt @ eff.S(k).T

    F = np.vstack([corrected(k - 1) for k in range(2, k_max + 1)])
    H = np.vstack([corrected(k) for k in range(2, k_max + 1)])

    scale = max(np.linalg.norm(m.R_y[0]), 1e-300)
    if np.linalg.norm(F) <= 1e-12 * scale:
        logger.warning("Lagged moments vanish: the latent process has no memory, Ω is zero")
        return OmegaEstimate(omega=np.zeros((p, p)), rank=0, condition=float("inf"), residual=0.0)

    U, s, Vh = linalg.svd(F, full_matrices=False)
    r = min(d_state if d_state is not None else p, s.size)
    condition = float(s[0] / s[r - 1]) if s[r - 1] > 0 else float("inf")
    if condition > MAX_CONDITION:
        raise IdentifiabilityError(
            f"lagged moment system is rank deficient (condition number {condition:.3e} at rank {r}); "
            "identification requires a full column rank stacked loading and a full rank transition"
        )
    omega_T = Vh[:r].T @ np.diag(1.0 / s[:r]) @ U[:, :r].T @ H
    residual = float(np.linalg.norm(F @ omega_T - H) / max(np.linalg.norm(H), 1e-300))
    logger.debug(f"Ω recovered at rank {r}, condition {condition:.3e}, relative residual {residual:.3e}")
    return OmegaEstimate(omega=omega_T.T, rank=r, condition=condition, residual=residual)


def recover_noise_and_gram(m: MomentSummary, eff: ActionEffects, omega: OmegaEstimate,
                           tol: Optional[float] = None) -> NoiseGram:
    """Separate Σ_ë from M using the lag-0 and lag-1 moments.

    J = Σ_ë + M and K = Σ_ë Ωᵀ give N0 = JΩᵀ - K = MΩᵀ; M lives in the range of Ω,
    so it is solved in the rank-r basis of Ω's leading left singular vectors.
    """
    p = m.p
    Bt = eff.loading_T(p)
    V = m.var_a
    R0, R1 = m.R_y[0], m.R_y[1]
    S1 = eff.S(1)
    Om = omega.omega
    BVB = Bt @ V @ Bt.T

    J = R0 - R1.T @ Om.T + S1 @ Bt.T @ Om.T - BVB
    K = R0 @ Om.T - BVB @ Om.T + Bt @ S1.T - R1
    N0 = J @ Om.T - K

    r = omega.rank
    if r == 0:
        M = np.zeros((p, p))
    else:
        U_r = linalg.svd(Om)[0][:, :r]
        Mr = U_r.T @ N0 @ np.linalg.pinv(U_r.T @ Om.T)
        Mr = 0.5 * (Mr + Mr.T)
        M = U_r @ Mr @ U_r.T
    cov_e_hat = J - M
    cov_e_hat = 0.5 * (cov_e_hat + cov_e_hat.T)

    residual = float(np.linalg.norm(cov_e_hat @ Om.T - K) / max(np.linalg.norm(K) + np.linalg.norm(R0), 1e-300))
    if tol is not None and residual > tol:
        raise IdentifiabilityError(
            f"noise system is inconsistent (relative residual {residual:.3e} > {tol:.1e}); "
            "moments are too noisy or the model is misspecified"
        )

    H1 = S1 @ np.linalg.inv(V)
    gram = M - H1 @ V @ H1.T
    gram = 0.5 * (gram + gram.T)
    min_eig = float(np.linalg.eigvalsh(gram).min())
    if min_eig < -1e-8:
        logger.warning(f"Recovered Gram matrix has a negative eigenvalue ({min_eig:.3e})")
    return NoiseGram(cov_e_hat=cov_e_hat, gram_hat=gram, M_hat=0.5 * (M + M.T), residual=residual,
                     min_gram_eig=min_eig)


def factor_from_gram(gram: np.ndarray, d_state: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Loading estimate sqrt(Λ_r) U_rᵀ (d_state x p) plus an eigen-gap report"""
    w, V = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    if not 1 <= d_state <= w.size:
        raise ModelValidationError(f"d_state must lie in 1..{w.size}, got {d_state}")
    factor = np.sqrt(np.clip(w[:d_state], 0.0, None))[:, None] * V[:, :d_state].T

    # floor the spectrum so the drop to numerically zero eigenvalues counts as a gap
    floored = np.clip(w, 1e-12 * max(w[0], 1e-300), None)
    suggested = int(np.argmax(floored[:-1] / floored[1:]) + 1) if w.size > 1 else 1
    return factor, {"eigenvalues": w.tolist(), "suggested_d_state": suggested}


def align_orthogonal(est_loading: np.ndarray, true_loading: np.ndarray) -> Tuple[np.ndarray, float]:
    """Orthogonal U minimizing ‖est - U true‖_F for d_s x p loadings"""
    est = np.asarray(est_loading, dtype=float)
    true = np.asarray(true_loading, dtype=float)
    if est.shape != true.shape:
        raise ModelValidationError(f"shape mismatch: {est.shape} vs {true.shape}")
    d_s = true.shape[0]
    if np.linalg.matrix_rank(true) < d_s or np.linalg.matrix_rank(est) < d_s:
        raise ModelValidationError("loadings must have full row rank for Procrustes alignment")
    R, _ = linalg.orthogonal_procrustes(true.T, est.T)
    U = R.T
    return U, float(np.linalg.norm(est - U @ true))


def recover_all(m: MomentSummary, d_state: Optional[int] = None, k_max: int = 4,
                tol: Optional[float] = None) -> IdentifiedParams:
    if d_state is not None and d_state > m.p:
        raise ModelValidationError(
            f"d_state={d_state} exceeds d_o + 1 = {m.p}; the stacked loading cannot have full column rank"
        )
    eff = recover_action_effects(m)
    om = recover_omega(m, eff, k_max=k_max, d_state=d_state)
    ng = recover_noise_and_gram(m, eff, om, tol=tol)
    diagnostics: Dict[str, Any] = {
        "n_samples": m.n_samples,
        "o_block_residual": eff.o_block_residual,
        "omega_rank": om.rank,
        "omega_condition": om.condition,
        "omega_residual": om.residual,
        "noise_residual": ng.residual,
        "min_gram_eig": ng.min_gram_eig,
    }
    loading = None
    if d_state is not None:
        loading, gap = factor_from_gram(ng.gram_hat, d_state)
        diagnostics["eigen_gap"] = gap
    logger.info(f"Identification finished: rank {om.rank}, Ω condition {om.condition:.3e}")
    return IdentifiedParams(
        C_a_to_r_hat=eff.C_a_to_r_hat,
        S_hat=eff.S_hat,
        omega_hat=om.omega,
        cov_e_hat=ng.cov_e_hat,
        gram_hat=ng.gram_hat,
        M_hat=ng.M_hat,
        loading_hat=loading,
        diagnostics=diagnostics,
    )


def observationally_equivalent(p1: LinearModelParams, p2: LinearModelParams, K: int, tol: float) -> bool:
    if (p1.d_s, p1.d_o, p1.d_a) != (p2.d_s, p2.d_o, p2.d_a):
        raise ModelValidationError("models differ in dimensions")
    if not np.allclose(p1.cov_a, p2.cov_a, atol=tol):
        raise ModelValidationError("models must share the action covariance")
    return all(
        np.max(np.abs(autocov_y(p1, k) - autocov_y(p2, k))) <= tol
        and np.max(np.abs(cross_cov_ya(p1, k) - cross_cov_ya(p2, k))) <= tol
        for k in range(K + 1)
    )


def identification_errors(ident: IdentifiedParams, params: LinearModelParams) -> Dict[str, float]:
    """Max absolute recovery error per quantity against the true parameters"""
    L = params.stacked_loading
    errors = {
        "C_a_to_r": float(np.max(np.abs(ident.C_a_to_r_hat - params.C_a_to_r))),
        "S": float(max(np.max(np.abs(S - cross_cov_ya(params, k + 1))) for k, S in enumerate(ident.S_hat))),
        "cov_e": float(np.max(np.abs(ident.cov_e_hat - params.stacked_noise_cov))),
        "gram": float(np.max(np.abs(ident.gram_hat - L.T @ L))),
    }
    errors["omega"] = float(np.max(np.abs(ident.omega_hat - observation_transition(params))))
    if ident.loading_hat is not None and ident.loading_hat.shape == L.shape:
        try:
            errors["loading_procrustes"] = align_orthogonal(ident.loading_hat, L)[1]
        except ModelValidationError:
            logger.warning("Loading alignment skipped: rank-deficient factor")
    return errors
