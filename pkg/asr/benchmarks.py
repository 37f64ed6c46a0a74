"""Named ground-truth environments used by the CLI, the pipeline and the tests."""

from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet

import numpy as np
from loguru import logger

from .errors import ModelValidationError
from .linear_env import LinearModelParams
from .structural_graph import StructuralGraph, asr_indices, figure1_graph, random_structural_graph

BENCHMARKS = ("figure1", "random-d4", "random-d5-sparse", "steering-toy")
COUPLING_RANGE = (0.3, 0.9)
REWARD_RANGE = (0.5, 0.9)


@dataclass(frozen=True)
class Benchmark:
    name: str
    seed: int
    params: LinearModelParams
    graph: StructuralGraph
    defaults: Dict[str, Any] = field(default_factory=dict)

    @property
    def asr(self) -> FrozenSet[int]:
        return asr_indices(self.graph)


def figure1_params() -> LinearModelParams:
    """Coefficients on the figure1 skeleton: s3 feeds s2, both reach the reward"""
    C_s = np.diag([0.7, 0.8, 0.6])
    C_s[2, 1] = 0.4
    C_s_to_o = np.array([
        [1.0, 0.0, 0.0, 0.3, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.3],
        [0.0, 0.0, 1.0, 0.3, 0.3],
    ])
    return LinearModelParams(
        C_s_to_o=C_s_to_o,
        C_s_to_r=[0.0, 0.9, 0.5],
        C_a_to_r=[0.3],
        C_s=C_s,
        C_a_to_s=[[0.6, 0.3, 0.0]],
        cov_e=0.05 * np.eye(5),
        var_eps=0.05,
        cov_a=np.eye(1),
    )


def steering_params() -> LinearModelParams:
    """Two dims: the action pushes the rewarded dim, the other is a distractor"""
    return LinearModelParams(
        C_s_to_o=[[1.0, 0.0, 0.3], [0.0, 1.0, 0.3]],
        C_s_to_r=[0.8, 0.0],
        C_a_to_r=[0.0],
        C_s=np.diag([0.8, 0.8]),
        C_a_to_s=[[0.5, 0.0]],
        cov_e=0.05 * np.eye(3),
        var_eps=0.05,
        cov_a=np.eye(1),
    )


def _magnitudes(rng: np.random.Generator, mask: np.ndarray, low: float, high: float) -> np.ndarray:
    values = rng.uniform(low, high, size=mask.shape) * rng.choice([-1.0, 1.0], size=mask.shape)
    return np.where(mask.astype(bool), values, 0.0)


def params_from_graph(g: StructuralGraph, rng: np.random.Generator, extra_obs: int = 2) -> LinearModelParams:
    """Coefficients on the graph's support; the transition stays triangular so the
    diagonal (|c| <= 0.9) bounds the spectral radius"""
    C_s = _magnitudes(rng, g.mask_s_to_s, *COUPLING_RANGE)
    C_s[np.diag_indices(g.d_s)] = np.abs(np.diag(C_s))
    if np.any(np.triu(C_s, k=1)):
        raise ModelValidationError("random benchmarks need cross-state edges from higher to lower index")
    d_o = g.d_s + extra_obs
    C_s_to_o = np.zeros((g.d_s, d_o))
    C_s_to_o[:, :g.d_s] = np.diag(rng.uniform(0.7, 1.0, size=g.d_s))
    C_s_to_o[:, g.d_s:] = 0.3 * rng.standard_normal((g.d_s, extra_obs))
    C_s_to_o *= g.mask_s_to_o[:, None]
    return LinearModelParams(
        C_s_to_o=C_s_to_o,
        C_s_to_r=_magnitudes(rng, g.mask_s_to_r, *REWARD_RANGE),
        C_a_to_r=_magnitudes(rng, g.mask_a_to_r, *COUPLING_RANGE),
        C_s=C_s,
        C_a_to_s=_magnitudes(rng, g.mask_a_to_s, *COUPLING_RANGE),
        cov_e=0.05 * np.eye(d_o),
        var_eps=0.05,
        cov_a=np.eye(g.d_a),
    )


def _random_graph(d_s: int, rng: np.random.Generator, edge_prob: float) -> StructuralGraph:
    """Random graph with at least one reward-coupled dimension"""
    while True:
        g = random_structural_graph(d_s, 1, rng, edge_prob=edge_prob, reward_prob=0.4)
        if g.mask_s_to_r.any() and len(asr_indices(g)) < d_s:
            return g


def make_benchmark(name: str, seed: int) -> Benchmark:
    if name not in BENCHMARKS:
        raise ModelValidationError(f"unknown benchmark '{name}'; choose one of {', '.join(BENCHMARKS)}")
    rng = np.random.default_rng(seed)
    defaults: Dict[str, Any] = {
        "data": {"T": 2000, "episodes": 20},
        "identification": {"K": 6},
        "learning": {"gamma": 0.8, "horizon": 20, "iterations": 400},
        "policy": {"action_set": [[-1.0], [1.0]], "episodes": 40, "horizon": 100, "n_planning": 20},
    }
    if name == "figure1":
        graph, params = figure1_graph(), figure1_params()
    elif name == "steering-toy":
        params = steering_params()
        graph = StructuralGraph.from_supports(params.C_s_to_o, params.C_s_to_r, params.C_a_to_r,
                                              params.C_s, params.C_a_to_s, threshold=0.0)
    else:
        d_s, edge_prob = (4, 0.35) if name == "random-d4" else (5, 0.15)
        graph = _random_graph(d_s, rng, edge_prob)
        params = params_from_graph(graph, rng)
    params.require_stationary()
    defaults["identification"]["d_state"] = params.d_s
    logger.info(f"Benchmark '{name}' (seed={seed}): d_s={params.d_s}, ASR {sorted(i + 1 for i in asr_indices(graph))}")
    return Benchmark(name=name, seed=seed, params=params, graph=graph, defaults=defaults)
