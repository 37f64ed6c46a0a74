"""Structured sequential objective for learning coefficients and the ASR gate.

The inference model is the exact Kalman posterior under the current coefficients,
so every term has a closed form and the whole objective is differentiable with
torch autograd (float64). Terms are per-step averages over the batch; the one-off
L1 penalties and the gate mass are divided by the mean episode length, i.e. the
rollout-summed objective scaled to a per-step value. The gate coupling to the
support-derived ASR is charged per step.

The transition KL is taken through a noise channel u = w*s + sqrt(1 - w^2)*xi with
w the gate. The prior of u is standard normal for any w, a binary w gives the exact
KL of the selected block, and a soft w keeps the term differentiable in the gate.

    total = recon_o + recon_r + pred_o + pred_r + λ3·suff - λ1·kl - sparsity
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from loguru import logger
from scipy.optimize import linear_sum_assignment

from .errors import DivergenceError, ModelValidationError, NumericalError
from .identification import align_orthogonal
from .linear_env import LinearModelParams, Trajectory, TrajectoryBatch, stationary_state_cov
from .structural_graph import StructuralGraph, asr_indices

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
CMI_RIDGE = 1e-8
GATE_LIMIT = 2.5


@dataclass(frozen=True)
class Lambdas:
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 1.0
    l4: float = 1.0
    l5: float = 1.0
    l6: float = 6.0
    l7: float = 10.0
    l8: float = 0.1

    def __post_init__(self):
        bad = {k: v for k, v in asdict(self).items() if v < 0 or not math.isfinite(v)}
        if bad:
            raise ModelValidationError(f"regularization weights must be finite and nonnegative: {bad}")


def default_horizon(gamma: float) -> int:
    """Truncation at which γ^H drops below 0.01"""
    if gamma <= 0.0:
        return 2
    if gamma >= 1.0:
        raise ModelValidationError("gamma = 1 needs an explicit horizon")
    return max(2, math.ceil(math.log(0.01) / math.log(gamma)))


class LearnableModel(torch.nn.Module):
    """Coefficients, diagonal noise scales and the relaxed ASR gate"""

    COEFFS = ("C_s_to_o", "C_s_to_r", "C_a_to_r", "C_s", "C_a_to_s")

    def __init__(self, d_state: int, d_o: int, d_a: int, lambdas: Optional[Lambdas] = None,
                 gamma: float = 0.99, horizon: Optional[int] = None, cov_a: Optional[np.ndarray] = None):
        super().__init__()
        if min(d_state, d_o, d_a) < 1:
            raise ModelValidationError("model dimensions must be positive")
        if not 0.0 <= gamma <= 1.0:
            raise ModelValidationError(f"gamma must lie in [0, 1], got {gamma}")
        self.lambdas = lambdas or Lambdas()
        self.gamma = float(gamma)
        self.horizon = int(horizon) if horizon is not None else default_horizon(gamma)
        if self.horizon < 2:
            raise ModelValidationError(f"horizon must be at least 2, got {self.horizon}")
        self.cov_a = np.eye(d_a) if cov_a is None else np.asarray(cov_a, dtype=float)

        def zeros(*shape):
            return torch.nn.Parameter(torch.zeros(*shape, dtype=DTYPE))

        self.C_s_to_o = zeros(d_state, d_o)
        self.C_s_to_r = zeros(d_state)
        self.C_a_to_r = zeros(d_a)
        self.C_s = zeros(d_state, d_state)
        self.C_a_to_s = zeros(d_a, d_state)
        self.log_cov_e = zeros(d_o)
        self.log_var_eps = zeros(())
        self.gate_logits = zeros(d_state)
        self.register_buffer("asr_target", torch.ones(d_state, dtype=DTYPE))

    @property
    def d_state(self) -> int:
        return self.C_s.shape[0]

    @property
    def d_o(self) -> int:
        return self.C_s_to_o.shape[1]

    @property
    def d_a(self) -> int:
        return self.C_a_to_s.shape[0]

    @classmethod
    def init_random(cls, d_state: int, d_o: int, d_a: int, seed: int, scale: float = 0.3,
                    **kwargs) -> "LearnableModel":
        model = cls(d_state, d_o, d_a, **kwargs)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name in cls.COEFFS:
                p = getattr(model, name)
                p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=DTYPE))
            model.C_s.add_(0.5 * torch.eye(d_state, dtype=DTYPE))
            model.C_s.mul_(0.5)
            model.gate_logits.fill_(0.5)
        model.refresh_asr_target()
        return model

    @classmethod
    def from_params(cls, params: LinearModelParams, gate: Optional[Iterable[int]] = None,
                    gate_logit: float = 10.0, **kwargs) -> "LearnableModel":
        """Model holding the given coefficients; `gate` selects dims (default: all)"""
        model = cls(params.d_s, params.d_o, params.d_a, cov_a=params.cov_a, **kwargs)
        with torch.no_grad():
            for name in cls.COEFFS:
                getattr(model, name).copy_(torch.as_tensor(np.asarray(getattr(params, name)), dtype=DTYPE))
            model.log_cov_e.copy_(torch.log(torch.as_tensor(np.clip(np.diag(params.cov_e), 1e-12, None), dtype=DTYPE)))
            model.log_var_eps.fill_(math.log(max(params.var_eps, 1e-12)))
            selected = set(range(params.d_s)) if gate is None else set(gate)
            model.gate_logits.copy_(torch.tensor(
                [gate_logit if i in selected else -gate_logit for i in range(params.d_s)], dtype=DTYPE))
        model.refresh_asr_target()
        return model

    def gate(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logits)

    def asr_set(self) -> FrozenSet[int]:
        with torch.no_grad():
            return frozenset(int(i) for i in torch.nonzero(self.gate() > 0.5).flatten())

    def coefficient(self, name: str) -> np.ndarray:
        return getattr(self, name).detach().numpy().copy()

    def structural_graph(self, threshold: float = 0.1) -> StructuralGraph:
        return StructuralGraph.from_supports(*(self.coefficient(n) for n in self.COEFFS), threshold=threshold)

    def derived_asr(self, threshold: float = 0.1) -> FrozenSet[int]:
        """ASR implied by the thresholded coefficient supports"""
        return asr_indices(self.structural_graph(threshold))

    def refresh_asr_target(self, threshold: float = 0.1):
        derived = self.derived_asr(threshold)
        self.asr_target.copy_(torch.tensor([1.0 if i in derived else 0.0 for i in range(self.d_state)], dtype=DTYPE))

    def to_params(self) -> LinearModelParams:
        return LinearModelParams(
            C_s_to_o=self.coefficient("C_s_to_o"),
            C_s_to_r=self.coefficient("C_s_to_r"),
            C_a_to_r=self.coefficient("C_a_to_r"),
            C_s=self.coefficient("C_s"),
            C_a_to_s=self.coefficient("C_a_to_s"),
            cov_e=np.diag(np.exp(self.log_cov_e.detach().numpy())),
            var_eps=float(np.exp(self.log_var_eps.item())),
            cov_a=self.cov_a,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "d_state": self.d_state, "d_o": self.d_o, "d_a": self.d_a,
            "lambdas": asdict(self.lambdas), "gamma": self.gamma, "horizon": self.horizon,
            "cov_a": self.cov_a.tolist(),
            **{name: self.coefficient(name).tolist() for name in self.COEFFS},
            "log_cov_e": self.log_cov_e.detach().numpy().tolist(),
            "log_var_eps": float(self.log_var_eps.item()),
            "gate_logits": self.gate_logits.detach().numpy().tolist(),
            "asr_target": self.asr_target.numpy().tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LearnableModel":
        model = cls(int(data["d_state"]), int(data["d_o"]), int(data["d_a"]), lambdas=Lambdas(**data["lambdas"]),
                    gamma=float(data["gamma"]), horizon=int(data["horizon"]), cov_a=np.asarray(data["cov_a"]))
        with torch.no_grad():
            for name in cls.COEFFS + ("log_cov_e", "log_var_eps", "gate_logits", "asr_target"):
                getattr(model, name).copy_(torch.as_tensor(np.asarray(data[name], dtype=float), dtype=DTYPE))
        return model


@dataclass(frozen=True)
class LossBreakdown:
    recon_o: float
    recon_r: float
    pred_o: float
    pred_r: float
    kl_transition: float
    suff_minus: float
    sparsity: float
    total: float
    sparsity_terms: Dict[str, float] = field(default_factory=dict)

    def as_row(self) -> Dict[str, float]:
        row = {k: v for k, v in asdict(self).items() if k != "sparsity_terms"}
        row.update({f"sparsity_{k}": v for k, v in self.sparsity_terms.items()})
        return row


def _groups(batch: TrajectoryBatch) -> List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Stack equal-length episodes into (obs, act, rew) tensors"""
    by_len: Dict[int, List[Trajectory]] = {}
    for ep in batch:
        by_len.setdefault(ep.T, []).append(ep)
    out = []
    for T in sorted(by_len):
        eps = by_len[T]
        out.append((
            torch.as_tensor(np.stack([e.observations for e in eps]), dtype=DTYPE),
            torch.as_tensor(np.stack([e.actions for e in eps]), dtype=DTYPE),
            torch.as_tensor(np.stack([e.rewards for e in eps]), dtype=DTYPE),
        ))
    return out


def _check_batch(model: LearnableModel, batch: TrajectoryBatch):
    if batch.d_o != model.d_o or batch.d_a != model.d_a:
        raise ModelValidationError(
            f"batch dims (d_o={batch.d_o}, d_a={batch.d_a}) do not match model (d_o={model.d_o}, d_a={model.d_a})"
        )
    if min(ep.T for ep in batch) < 3:
        raise ModelValidationError("episodes need at least 3 steps")


def _sym(P: torch.Tensor) -> torch.Tensor:
    return 0.5 * (P + P.T)


def _initial_cov(model: LearnableModel) -> torch.Tensor:
    """Differentiable stationary covariance; a broad prior when the transition is unstable"""
    d = model.d_state
    A = model.C_s.T
    eye = torch.eye(d, dtype=DTYPE)
    with torch.no_grad():
        rho = torch.linalg.eigvals(A).abs().max().item()
    if rho >= 0.999:
        return 10.0 * eye
    G = model.C_a_to_s.T
    Q = G @ torch.as_tensor(model.cov_a, dtype=DTYPE) @ G.T + eye
    vec = torch.linalg.solve(torch.eye(d * d, dtype=DTYPE) - torch.kron(A, A), Q.reshape(-1))
    return _sym(vec.reshape(d, d))


@dataclass
class _Pass:
    """Per-group filter outputs and summed data terms"""
    recon_o: torch.Tensor
    recon_r: torch.Tensor
    pred_o: torch.Tensor
    pred_r: torch.Tensor
    kl_moment: torch.Tensor
    post_cov: torch.Tensor
    n_recon: int
    n_pred_r: int
    n_kl: int
    cmi_rows: Optional[torch.Tensor]


def _filter_pass(model: LearnableModel, obs: torch.Tensor, act: torch.Tensor, rew: torch.Tensor,
                 horizon: int) -> _Pass:
    B, T, d_o = obs.shape
    n = T - 1
    d = model.d_state
    eye = torch.eye(d, dtype=DTYPE)
    A = model.C_s.T
    G = model.C_a_to_s.T
    Ho = model.C_s_to_o.T
    cr = model.C_s_to_r
    car = model.C_a_to_r
    re = torch.exp(model.log_cov_e)
    Re = torch.diag(re)
    ve = torch.exp(model.log_var_eps)

    m = torch.zeros(B, d, dtype=DTYPE)
    P = _initial_cov(model)
    dec_means, filt_means, filt_covs = [], [], []
    for t in range(n):
        if t > 0:
            m = m @ A.T + act[:, t - 1] @ G.T
            P = _sym(A @ P @ A.T + eye)
        S = _sym(Ho @ P @ Ho.T + Re)
        K = torch.linalg.solve(S, Ho @ P).T
        m = m + (obs[:, t] - m @ Ho.T) @ K.T
        I_KH = eye - K @ Ho
        P = _sym(I_KH @ P @ I_KH.T + K @ Re @ K.T)
        dec_means.append(m)

        s = cr @ P @ cr + ve
        k = P @ cr / s
        m = m + (rew[:, t] - m @ cr - act[:, t] @ car)[:, None] * k[None, :]
        I_kc = eye - torch.outer(k, cr)
        P = _sym(I_kc @ P @ I_kc.T + ve * torch.outer(k, k))
        filt_means.append(m)
        filt_covs.append(P)

    Mf = torch.stack(filt_means, dim=1)          # (B, n, d)
    Pf = torch.stack(filt_covs)                    # (n, d, d)

    # reconstruction of o_t and r_{t+1} under the filtered posterior of s_t
    resid_o = obs[:, :n] - Mf @ Ho.T
    tr_o = torch.einsum("tij,ji->t", Pf, Ho.T @ torch.diag(1.0 / re) @ Ho)
    recon_o = (-0.5 * (d_o * LOG_2PI + torch.log(re).sum() + (resid_o ** 2 / re).sum(-1)) - 0.5 * tr_o).sum()
    resid_r = rew - Mf @ cr - act @ car
    tr_r = torch.einsum("i,tij,j->t", cr, Pf, cr) / ve
    recon_r = (-0.5 * (LOG_2PI + torch.log(ve) + resid_r ** 2 / ve) - 0.5 * tr_r).sum()

    # one-step prediction of o_{t+1} and r_{t+2} from s_t
    mean_next = Mf @ A.T + act @ G.T                # (B, n, d)
    APA = A @ Pf @ A.T                             # (n, d, d)
    C = Ho @ Ho.T + Re
    C_chol = torch.linalg.cholesky(C)
    resid_po = obs[:, 1:] - mean_next @ Ho.T
    white = torch.linalg.solve_triangular(C_chol, resid_po.reshape(-1, d_o).T, upper=False)
    maha = (white ** 2).sum(0).reshape(B, n)
    logdet_C = 2.0 * torch.log(torch.diagonal(C_chol)).sum()
    tr_po = torch.einsum("tij,ji->t", APA, Ho.T @ torch.cholesky_inverse(C_chol) @ Ho)
    pred_o = (-0.5 * (d_o * LOG_2PI + logdet_C + maha) - 0.5 * tr_po).sum()
    c = cr @ cr + ve
    resid_pr = rew[:, 1:] - mean_next[:, :-1] @ cr - act[:, 1:] @ car
    tr_pr = torch.einsum("i,tij,j->t", cr, APA[:-1], cr) / c
    pred_r = (-0.5 * (LOG_2PI + torch.log(c) + resid_pr ** 2 / c) - 0.5 * tr_pr).sum()

    # moments of the posterior-minus-prior mean shift of s_t given s_{t-1}, t >= 1
    H = torch.cat([Ho, cr[None, :]], dim=0)
    r_inv = torch.cat([1.0 / re, (1.0 / ve)[None]])
    P_post = torch.linalg.inv(eye + H.T @ (r_inv[:, None] * H))
    P_post = _sym(P_post)
    K_post = P_post @ H.T * r_inv[None, :]
    y_c = torch.cat([obs[:, 1:n], (rew[:, 1:] - act[:, 1:] @ car)[..., None]], dim=-1)   # (B, n-1, p)
    mu_prior = Mf[:, :-1] @ A.T + act[:, :-1] @ G.T
    delta = (y_c - mu_prior @ H.T) @ K_post.T
    KHA = K_post @ H @ A
    kl_moment = torch.einsum("bti,btj->ij", delta, delta) + B * (KHA @ Pf[:-1].sum(0) @ KHA.T)

    # rows (m_t, m_{t-1}, a_{t-1}, a_t, R_{t+1}) from decision-time means, t = 1 .. n - horizon
    cmi_rows = None
    if n - horizon >= 1:
        Md = torch.stack(dec_means, dim=1)
        weights = model.gamma ** torch.arange(horizon, dtype=DTYPE)
        R = (rew.unfold(1, horizon, 1) * weights).sum(-1)           # R[:, t] = Σ_k γ^k rew[:, t+k]
        last = n - horizon + 1
        cmi_rows = torch.cat([
            Md[:, 1:last], Md[:, 0:last - 1], act[:, 0:last - 1], act[:, 1:last], R[:, 1:last, None],
        ], dim=-1).reshape(-1, 2 * d + 2 * model.d_a + 1)

    return _Pass(recon_o=recon_o, recon_r=recon_r, pred_o=pred_o, pred_r=pred_r, kl_moment=_sym(kl_moment),
                 post_cov=P_post, n_recon=B * n, n_pred_r=B * (n - 1), n_kl=B * (n - 1), cmi_rows=cmi_rows)


def gaussian_cmi(cov: Any, x: Sequence[int], y: Sequence[int], z: Sequence[int]) -> torch.Tensor:
    """I(X;Y|Z) = ½[log|Σ_xz| + log|Σ_yz| - log|Σ_z| - log|Σ_xyz|] for a joint Gaussian"""
    cov = torch.as_tensor(cov, dtype=DTYPE)
    x, y, z = list(x), list(y), list(z)
    if not x or not y:
        return torch.zeros((), dtype=DTYPE)

    def logdet(idx):
        if not idx:
            return torch.zeros((), dtype=DTYPE)
        sub = cov[idx][:, idx]
        sign, val = torch.linalg.slogdet(sub)
        if sign.item() <= 0:
            raise NumericalError("conditioning covariance is not positive definite")
        return val

    return 0.5 * (logdet(x + z) + logdet(y + z) - logdet(z) - logdet(x + y + z))


def _row_cov(rows: torch.Tensor) -> torch.Tensor:
    centered = rows - rows.mean(dim=0, keepdim=True)
    return centered.T @ centered / rows.shape[0]


def _gated_cmi(model: LearnableModel, S: torch.Tensor, random_policy: bool,
               hard: bool) -> Tuple[torch.Tensor, torch.Tensor]:
    """(I_asr, I_complement) on the row covariance S of (m_t, m_{t-1}, a_{t-1}, a_t, R)"""
    d, da = model.d_state, model.d_a
    n_rest = 2 * da + 1
    ridge = CMI_RIDGE * torch.eye(S.shape[0], dtype=DTYPE)
    if hard:
        asr = sorted(model.asr_set())
        comp = [i for i in range(d) if i not in asr]
        cov = S + ridge
        X, C, Zs = asr, comp, [d + i for i in asr]
        a_prev = list(range(2 * d, 2 * d + da))
        a_now = list(range(2 * d + da, 2 * d + 2 * da))
        R = [2 * d + 2 * da]
    else:
        w = model.gate()
        zero_dd = torch.zeros(d, d, dtype=DTYPE)
        zero_dr = torch.zeros(d, n_rest, dtype=DTYPE)
        Tm = torch.cat([
            torch.cat([torch.diag(w), zero_dd, zero_dr], dim=1),
            torch.cat([torch.diag(1.0 - w), zero_dd, zero_dr], dim=1),
            torch.cat([zero_dd, torch.diag(w), zero_dr], dim=1),
            torch.cat([torch.zeros(n_rest, 2 * d, dtype=DTYPE), torch.eye(n_rest, dtype=DTYPE)], dim=1),
        ], dim=0)
        var = torch.diagonal(S)
        # a channel that keeps fraction w of each coordinate and tops up its variance with noise
        noise = torch.cat([
            (1.0 - w ** 2) * var[:d],
            (1.0 - (1.0 - w) ** 2) * var[:d],
            (1.0 - w ** 2) * var[d:2 * d],
            torch.zeros(n_rest, dtype=DTYPE),
        ])
        cov = Tm @ S @ Tm.T + torch.diag(noise) + CMI_RIDGE * torch.eye(Tm.shape[0], dtype=DTYPE)
        X, C, Zs = list(range(d)), list(range(d, 2 * d)), list(range(2 * d, 3 * d))
        a_prev = list(range(3 * d, 3 * d + da))
        a_now = list(range(3 * d + da, 3 * d + 2 * da))
        R = [3 * d + 2 * da]

    if random_policy:
        target, cond = a_now, R + Zs
    else:
        target, cond = R, a_prev + a_now + Zs
    return gaussian_cmi(cov, X, target, cond), gaussian_cmi(cov, C, target, cond)


def _gated_kl(post_cov: torch.Tensor, moment: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """½[Σ w²(P_ii + M_ii - 1) - log|I - W² + W P W|] for mean-shift second moment M"""
    d = w.shape[0]
    W = torch.diag(w)
    inner = _sym(torch.eye(d, dtype=DTYPE) - W @ W + W @ post_cov @ W)
    chol = torch.linalg.cholesky(inner)
    logdet = 2.0 * torch.log(torch.diagonal(chol)).sum()
    return 0.5 * ((w ** 2 * (torch.diagonal(post_cov) + torch.diagonal(moment) - 1.0)).sum() - logdet)


def _kl_moments(passes: List[_Pass]) -> Tuple[torch.Tensor, torch.Tensor]:
    moment = sum(p.kl_moment for p in passes) / sum(p.n_kl for p in passes)
    return passes[0].post_cov, moment


def _marginal_kl(post_cov: torch.Tensor, moment: torch.Tensor) -> torch.Tensor:
    post_var = torch.diagonal(post_cov)
    return 0.5 * (post_var + torch.diagonal(moment) - 1.0 - torch.log(post_var))


def _hard_gate(model: LearnableModel) -> torch.Tensor:
    with torch.no_grad():
        return (model.gate() > 0.5).to(DTYPE)


def sparsity_penalty(model: LearnableModel, scale: float = 1.0) -> Dict[str, torch.Tensor]:
    lam = model.lambdas
    w = model.gate()
    return {
        "C_s_to_o": scale * lam.l5 * model.C_s_to_o.abs().sum(),
        "C_s_to_r": scale * lam.l6 * model.C_s_to_r.abs().sum(),
        "C_s": scale * lam.l7 * model.C_s.abs().sum(),
        "C_a_to_s": scale * lam.l8 * model.C_a_to_s.abs().sum(),
        "gate": scale * lam.l2 * w.sum(),
        "gate_coupling": lam.l4 * (model.asr_target - w).abs().sum(),
    }


# coefficient groups handled by the proximal step, with their weight attribute
PROXIMAL = {"C_s_to_o": "l5", "C_s_to_r": "l6", "C_s": "l7", "C_a_to_s": "l8"}


def _objective(model: LearnableModel, batch: TrajectoryBatch, random_policy: bool = False,
               hard: bool = False) -> Dict[str, Any]:
    """All objective terms as tensors (graph attached)"""
    _check_batch(model, batch)
    passes = [_filter_pass(model, obs, act, rew, model.horizon) for obs, act, rew in _groups(batch)]
    n_recon = sum(p.n_recon for p in passes)
    n_pred_r = sum(p.n_pred_r for p in passes)
    terms: Dict[str, Any] = {
        "recon_o": sum(p.recon_o for p in passes) / n_recon,
        "recon_r": sum(p.recon_r for p in passes) / n_recon,
        "pred_o": sum(p.pred_o for p in passes) / n_recon,
        "pred_r": sum(p.pred_r for p in passes) / n_pred_r,
    }
    post_cov, moment = _kl_moments(passes)
    gate = _hard_gate(model) if hard else model.gate()
    terms["kl_dims"] = _marginal_kl(post_cov, moment)
    terms["kl_transition"] = _gated_kl(post_cov, moment, gate)

    rows = [p.cmi_rows for p in passes if p.cmi_rows is not None]
    if not rows:
        raise ModelValidationError(f"episodes are too short to form returns over horizon {model.horizon}")
    S = _row_cov(torch.cat(rows, dim=0))
    if torch.linalg.eigvalsh(S).min().item() < 1e-10:
        logger.warning("Sufficiency covariance is near singular; ridge regularization applied")
    i_asr, i_comp = _gated_cmi(model, S, random_policy=random_policy, hard=hard)
    terms["suff_asr"] = i_asr
    terms["suff_comp"] = i_comp
    terms["suff_minus"] = i_asr - i_comp

    scale = len(batch) / n_recon
    terms["sparsity_terms"] = sparsity_penalty(model, scale)
    terms["sparsity"] = sum(terms["sparsity_terms"].values())

    lam = model.lambdas
    for name in ("recon_o", "recon_r", "pred_o", "pred_r", "kl_transition", "suff_minus", "sparsity"):
        if not torch.isfinite(terms[name]).all():
            raise NumericalError(f"objective term '{name}' is not finite")
    terms["total"] = (terms["recon_o"] + terms["recon_r"] + terms["pred_o"] + terms["pred_r"]
                      + lam.l3 * terms["suff_minus"] - lam.l1 * terms["kl_transition"] - terms["sparsity"])
    terms["penalty_scale"] = scale
    return terms


def _breakdown(terms: Dict[str, Any], lam: Lambdas) -> LossBreakdown:
    parts = {k: float(terms[k].item()) for k in
             ("recon_o", "recon_r", "pred_o", "pred_r", "kl_transition", "suff_minus", "sparsity")}
    total = (parts["recon_o"] + parts["recon_r"] + parts["pred_o"] + parts["pred_r"]
             + lam.l3 * parts["suff_minus"] - lam.l1 * parts["kl_transition"] - parts["sparsity"])
    return LossBreakdown(**parts, total=total,
                         sparsity_terms={k: float(v.item()) for k, v in terms["sparsity_terms"].items()})


def elbo_terms(model: LearnableModel, batch: TrajectoryBatch, random_policy: bool = False) -> LossBreakdown:
    with torch.no_grad():
        terms = _objective(model, batch, random_policy=random_policy)
    return _breakdown(terms, model.lambdas)


def sufficiency_parts(model: LearnableModel, batch: TrajectoryBatch, horizon: Optional[int] = None,
                      hard: bool = False, random_policy: bool = False) -> Tuple[float, float]:
    if random_policy and not batch.iid_actions:
        logger.warning("Random-policy sufficiency used on data that was not collected with i.i.d. actions")
    saved = model.horizon
    if horizon is not None:
        if horizon < 2:
            raise ModelValidationError(f"horizon must be at least 2, got {horizon}")
        model.horizon = int(horizon)
    try:
        with torch.no_grad():
            terms = _objective(model, batch, random_policy=random_policy, hard=hard)
    finally:
        model.horizon = saved
    return float(terms["suff_asr"].item()), float(terms["suff_comp"].item())


def sufficiency_terms(model: LearnableModel, batch: TrajectoryBatch, horizon: Optional[int] = None,
                      hard: bool = False) -> float:
    i_asr, i_comp = sufficiency_parts(model, batch, horizon, hard=hard)
    return i_asr - i_comp


def sufficiency_terms_random_policy(model: LearnableModel, batch: TrajectoryBatch, horizon: Optional[int] = None,
                                    hard: bool = False) -> float:
    i_asr, i_comp = sufficiency_parts(model, batch, horizon, hard=hard, random_policy=True)
    return i_asr - i_comp


def minimality_kl(model: LearnableModel, batch: TrajectoryBatch, per_dim: bool = False):
    """Average expected transition KL of the selected ASR block (joint, not summed marginals);
    `per_dim` also returns the marginal KL of every dimension"""
    _check_batch(model, batch)
    with torch.no_grad():
        passes = [_filter_pass(model, obs, act, rew, model.horizon) for obs, act, rew in _groups(batch)]
        post_cov, moment = _kl_moments(passes)
        value = float(_gated_kl(post_cov, moment, _hard_gate(model)).item())
        if per_dim:
            return value, _marginal_kl(post_cov, moment).numpy().copy()
    return value


def population_joint_cov(params: LinearModelParams, horizon: int, gamma: float) -> Tuple[np.ndarray, Dict[str, List[int]]]:
    """Exact covariance of (s_t, s_{t-1}, a_{t-1}, a_t, R_{t+1}) under the stationary model"""
    d, da, H = params.d_s, params.d_a, int(horizon)
    A = params.C_s.T
    G = params.C_a_to_s.T
    # base variables: s_{t-1}, a_{t-1..t+H-1}, η_{t..t+H-1}, ε_{1..H}
    n_base = d + da * (H + 1) + d * H + H
    cov_base = np.zeros((n_base, n_base))
    cov_base[:d, :d] = stationary_state_cov(params)
    off = d
    for _ in range(H + 1):
        cov_base[off:off + da, off:off + da] = params.cov_a
        off += da
    cov_base[off:off + d * H, off:off + d * H] = np.eye(d * H)
    off += d * H
    cov_base[off:, off:] = params.var_eps * np.eye(H)

    def a_sel(k):   # a_{t-1+k}
        M = np.zeros((da, n_base))
        M[:, d + k * da: d + (k + 1) * da] = np.eye(da)
        return M

    def eta_sel(k):  # η_{t+k}
        M = np.zeros((d, n_base))
        start = d + da * (H + 1) + k * d
        M[:, start:start + d] = np.eye(d)
        return M

    s_prev = np.zeros((d, n_base))
    s_prev[:, :d] = np.eye(d)
    s = A @ s_prev + G @ a_sel(0) + eta_sel(0)
    s_t = s.copy()
    R = np.zeros((1, n_base))
    for k in range(H):
        r = params.C_s_to_r[None, :] @ s + params.C_a_to_r[None, :] @ a_sel(k + 1)
        r[0, d + da * (H + 1) + d * H + k] = 1.0
        R += gamma ** k * r
        if k < H - 1:
            s = A @ s + G @ a_sel(k + 1) + eta_sel(k + 1)

    F = np.vstack([s_t, s_prev, a_sel(0), a_sel(1), R])
    cov = F @ cov_base @ F.T
    layout = {
        "s_t": list(range(d)),
        "s_prev": list(range(d, 2 * d)),
        "a_prev": list(range(2 * d, 2 * d + da)),
        "a_now": list(range(2 * d + da, 2 * d + 2 * da)),
        "R": [2 * d + 2 * da],
    }
    return 0.5 * (cov + cov.T), layout


def population_sufficiency_cmi(params: LinearModelParams, dims: Iterable[int], horizon: int, gamma: float,
                               asr: Optional[Iterable[int]] = None, random_policy: bool = False) -> float:
    """Exact CMI of s_t[dims] with the return given the action pair and s_{t-1}[asr] on true latents"""
    cov, lay = population_joint_cov(params, horizon, gamma)
    dims = sorted(dims)
    cond_asr = sorted(dims if asr is None else asr)
    Zs = [lay["s_prev"][i] for i in cond_asr]
    X = [lay["s_t"][i] for i in dims]
    if random_policy:
        value = gaussian_cmi(cov, X, lay["a_now"], lay["R"] + Zs)
    else:
        value = gaussian_cmi(cov, X, lay["R"], lay["a_prev"] + lay["a_now"] + Zs)
    return float(value.item())


def population_cmi_table(params: LinearModelParams, asr: Iterable[int], horizon: int,
                         gamma: float) -> pd.DataFrame:
    asr = sorted(asr)
    rows = [{
        "dim": i + 1,
        "in_asr": i in asr,
        "cmi_reward": population_sufficiency_cmi(params, [i], horizon, gamma, asr=asr),
        "cmi_action": population_sufficiency_cmi(params, [i], horizon, gamma, asr=asr, random_policy=True),
    } for i in range(params.d_s)]
    return pd.DataFrame(rows)


def _flat_params(model: LearnableModel) -> List[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def grad_check(model: LearnableModel, batch: TrajectoryBatch, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of the total.

    The denominator is max(|analytic|, |numeric|, 1e-4), so tiny gradients are compared
    in absolute terms at the roundoff level of the objective; entries with |analytic| <= 1e-8
    are skipped.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ModelValidationError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    model.zero_grad()
    total = _objective(model, batch)["total"]
    if not torch.isfinite(total):
        raise NumericalError("objective is not finite")
    total.backward()
    worst = 0.0
    with torch.no_grad():
        for p in _flat_params(model):
            flat = p.view(-1)
            grad = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                if abs(grad[i].item()) <= 1e-8:
                    continue
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _objective(model, batch)["total"].item()
                flat[i] = orig - eps
                down = _objective(model, batch)["total"].item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                analytic = grad[i].item()
                rel = abs(numeric - analytic) / max(abs(analytic), abs(numeric), 1e-4)
                worst = max(worst, rel)
    model.zero_grad()
    logger.debug(f"Gradient check (eps={eps}): max relative error {worst:.3e}")
    return worst


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    iterations: int = 300
    lr: float = 0.05
    gate_lr: float = 0.5
    segment_length: int = 100
    segments_per_batch: int = 8
    structure_every: int = 50
    support_threshold: float = 0.1
    clip_norm: float = 10.0
    log_every: int = 25

    def __post_init__(self):
        if self.iterations < 0 or self.lr < 0 or self.gate_lr < 0:
            raise ModelValidationError("iterations and step sizes must be nonnegative")
        if self.segment_length < 3 or self.segments_per_batch < 1 or self.structure_every < 1:
            raise ModelValidationError("segment_length >= 3, segments_per_batch >= 1, structure_every >= 1 required")


def _minibatch(data: TrajectoryBatch, cfg: TrainConfig, rng: np.random.Generator) -> TrajectoryBatch:
    segments = []
    for _ in range(cfg.segments_per_batch):
        ep = data.episodes[int(rng.integers(len(data)))]
        length = min(cfg.segment_length, ep.T)
        start = int(rng.integers(ep.T - length + 1))
        stop = start + length
        segments.append(Trajectory(
            observations=ep.observations[start:stop],
            actions=ep.actions[start:stop - 1],
            rewards=ep.rewards[start:stop - 1],
            iid_actions=ep.iid_actions,
        ))
    return TrajectoryBatch(tuple(segments))


def _proximal_step(model: LearnableModel, lr: float, scale: float):
    """Soft-threshold each L1-penalized coefficient group"""
    with torch.no_grad():
        for name, weight in PROXIMAL.items():
            p = getattr(model, name)
            thresh = lr * scale * getattr(model.lambdas, weight)
            p.copy_(torch.sign(p) * torch.clamp(p.abs() - thresh, min=0.0))


def train(model: LearnableModel, data: TrajectoryBatch, cfg: TrainConfig) -> Tuple[LearnableModel, pd.DataFrame]:
    """Proximal gradient ascent on the total; returns the model and its loss history"""
    _check_batch(model, data)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    coeff_params = [getattr(model, n) for n in LearnableModel.COEFFS] + [model.log_cov_e, model.log_var_eps]
    optimizer = torch.optim.SGD([
        {"params": coeff_params, "lr": cfg.lr},
        {"params": [model.gate_logits], "lr": cfg.gate_lr},
    ], lr=cfg.lr, maximize=True)

    # a frozen run only evaluates; the support-derived target stays as loaded
    frozen = cfg.lr == 0 and cfg.gate_lr == 0
    history: List[Dict[str, float]] = []
    logger.info(f"Training {model.d_state}-dim model for {cfg.iterations} iterations (seed={cfg.seed})")
    for it in range(cfg.iterations):
        if not frozen and it % cfg.structure_every == 0:
            model.refresh_asr_target(cfg.support_threshold)
        batch = _minibatch(data, cfg, rng)
        optimizer.zero_grad()
        try:
            terms = _objective(model, batch)
        except NumericalError as e:
            raise DivergenceError(str(e), it) from e
        sp = terms["sparsity_terms"]
        smooth = terms["total"] + sum(sp[n] for n in PROXIMAL)
        if not torch.isfinite(smooth) or smooth.item() < -1e8:
            raise DivergenceError("objective diverged", it)
        smooth.backward()
        torch.nn.utils.clip_grad_norm_(coeff_params, cfg.clip_norm)
        torch.nn.utils.clip_grad_norm_([model.gate_logits], cfg.clip_norm)
        optimizer.step()
        _proximal_step(model, cfg.lr, terms["penalty_scale"])
        if cfg.gate_lr > 0:
            # logits stay within ±GATE_LIMIT so a closed gate can reopen
            with torch.no_grad():
                model.gate_logits.clamp_(-GATE_LIMIT, GATE_LIMIT)

        row = {"iteration": it, **_breakdown(terms, model.lambdas).as_row()}
        history.append(row)
        if it % cfg.log_every == 0:
            logger.debug(f"iter {it}: total={row['total']:.4f} kl={row['kl_transition']:.4f} "
                         f"suff={row['suff_minus']:.4f} gate={model.gate().detach().numpy().round(3).tolist()}")

    if not frozen:
        model.refresh_asr_target(cfg.support_threshold)
    frame = pd.DataFrame(history)
    if not frame.empty:
        frame["total_smoothed"] = frame["total"].ewm(alpha=0.1).mean()
        smoothed = frame["total_smoothed"].to_numpy()
        if smoothed[-1] < smoothed[0]:
            logger.warning("Smoothed objective decreased over training; consider a smaller step size")
    logger.info(f"Training finished: learned ASR {sorted(i + 1 for i in model.asr_set())}")
    return model, frame


def align_to_truth(model: LearnableModel, params: LinearModelParams) -> Tuple[LinearModelParams, Dict[int, int]]:
    """Rotate the learned basis onto the true one by the signed permutation closest to
    the Procrustes solution; returns the aligned params and learned -> true index map"""
    learned = model.to_params()
    if learned.d_s != params.d_s:
        raise ModelValidationError("alignment needs the learned and true state dimensions to match")
    U, _ = align_orthogonal(learned.stacked_loading, params.stacked_loading)
    rows, cols = linear_sum_assignment(-np.abs(U))
    P = np.zeros_like(U)
    P[rows, cols] = np.sign(U[rows, cols])
    mapping = {int(r): int(c) for r, c in zip(rows, cols)}
    return learned.rotate(P), mapping


def structure_f1(model: LearnableModel, params: LinearModelParams, threshold: float = 0.1) -> float:
    """F1 of learned vs true coefficient supports after aligning the learned basis"""
    aligned, _ = align_to_truth(model, params)
    tp = fp = fn = 0
    for name in ("C_s", "C_s_to_r", "C_a_to_s"):
        est = np.abs(getattr(aligned, name)) > threshold
        true = np.abs(getattr(params, name)) > 1e-12
        tp += int(np.sum(est & true))
        fp += int(np.sum(est & ~true))
        fn += int(np.sum(~est & true))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def aligned_asr(model: LearnableModel, params: LinearModelParams) -> FrozenSet[int]:
    """Learned gate support expressed in the true state indices"""
    _, mapping = align_to_truth(model, params)
    return frozenset(mapping[i] for i in model.asr_set())


def support_sensitivity(model: LearnableModel, thresholds: Sequence[float] = (0.05, 0.1, 0.2)) -> pd.DataFrame:
    rows = []
    for th in thresholds:
        g = model.structural_graph(th)
        rows.append({
            "threshold": th,
            "derived_asr": ",".join(str(i + 1) for i in sorted(asr_indices(g))),
            "n_edges": int(g.mask_s_to_s.sum() + g.mask_a_to_s.sum() + g.mask_s_to_r.sum()),
        })
    return pd.DataFrame(rows)
