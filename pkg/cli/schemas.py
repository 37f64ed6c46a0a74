from pydantic import BaseModel, Field, model_validator
from typing import Dict, List, Literal, Optional, Any
from asr.linear_env import LinearModelParams
from asr.objective_learning import Lambdas
from asr.policy import PolicyConfig
from asr.structural_graph import StructuralGraph

BenchmarkName = Literal["figure1", "random-d4", "random-d5-sparse", "steering-toy"]


class GraphSpec(BaseModel):
    d_s: int = Field(..., ge=1, description="Latent state dimension")
    d_a: int = Field(..., ge=1, description="Action dimension")
    mask_s_to_s: List[List[int]] = Field(..., description="mask_s_to_s[j][i] = 1 iff s_j,t-1 -> s_i,t")
    mask_a_to_s: List[List[int]]
    mask_s_to_r: List[int]
    mask_a_to_r: List[int]
    mask_s_to_o: List[int]

    def to_graph(self) -> StructuralGraph:
        return StructuralGraph.from_dict(self.model_dump())

    @classmethod
    def from_graph(cls, graph: StructuralGraph) -> "GraphSpec":
        return cls(**graph.to_dict())


class ParamsSpec(BaseModel):
    C_s_to_o: List[List[float]]
    C_s_to_r: List[float]
    C_a_to_r: List[float]
    C_s: List[List[float]]
    C_a_to_s: List[List[float]]
    cov_e: List[List[float]]
    var_eps: float = Field(..., ge=0.0)
    cov_a: List[List[float]]

    def to_params(self) -> LinearModelParams:
        return LinearModelParams.from_dict(self.model_dump())

    @classmethod
    def from_params(cls, params: LinearModelParams) -> "ParamsSpec":
        return cls(**params.to_dict())


class LambdaConfig(BaseModel):
    l1: float = Field(1.0, ge=0.0, description="Transition KL (minimality)")
    l2: float = Field(1.0, ge=0.0, description="Gate mass")
    l3: float = Field(1.0, ge=0.0, description="Sufficiency CMI difference")
    l4: float = Field(1.0, ge=0.0, description="Gate vs structural ASR coupling")
    l5: float = Field(1.0, ge=0.0, description="L1 on C_s_to_o")
    l6: float = Field(6.0, ge=0.0, description="L1 on C_s_to_r")
    l7: float = Field(10.0, ge=0.0, description="L1 on C_s")
    l8: float = Field(0.1, ge=0.0, description="L1 on C_a_to_s")

    def to_lambdas(self) -> Lambdas:
        return Lambdas(**self.model_dump())


class TrainConfig(BaseModel):
    d_state: Optional[int] = Field(None, ge=1, description="Learned state dimension (default: true d_s)")
    lambdas: LambdaConfig = Field(default_factory=LambdaConfig)
    iterations: int = Field(300, ge=0)
    lr: float = Field(0.05, ge=0.0)
    gate_lr: float = Field(0.5, ge=0.0)
    gamma: float = Field(0.9, ge=0.0, le=1.0)
    horizon: int = Field(20, ge=2, description="Truncation of the discounted return")
    segment_length: int = Field(100, ge=3)
    segments_per_batch: int = Field(8, ge=1)
    structure_every: int = Field(50, ge=1)
    support_threshold: float = Field(0.1, gt=0.0)


class PolicyConfigSpec(BaseModel):
    action_set: List[List[float]] = Field(default_factory=lambda: [[-1.0], [1.0]], min_length=1)
    episodes: int = Field(40, ge=0)
    horizon: int = Field(100, ge=2)
    epsilon_start: float = Field(1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(0.05, ge=0.0, le=1.0)
    epsilon_decay: float = Field(0.9, gt=0.0, le=1.0)
    lr: float = Field(0.01, gt=0.0)
    gamma: float = Field(0.9, ge=0.0, lt=1.0)
    replay_capacity: int = Field(10000, ge=1)
    minibatch: int = Field(32, ge=1)
    n_planning: int = Field(0, ge=0)
    model_refresh_every: int = Field(1, ge=0)
    feature_degree: int = Field(1, ge=1, le=2)
    include_bias: bool = True
    include_variance: bool = False
    sample_asr: bool = False
    eval_episodes: int = Field(20, ge=1)

    def to_policy_config(self) -> PolicyConfig:
        fields = self.model_dump(exclude={"eval_episodes"})
        fields["action_set"] = tuple(tuple(a) for a in fields["action_set"])
        return PolicyConfig(**fields)


class DataSpec(BaseModel):
    T: int = Field(2000, ge=3, description="Steps per episode")
    episodes: int = Field(20, ge=1)


class IdentificationSpec(BaseModel):
    K: int = Field(6, ge=1, description="Largest moment lag")
    d_state: Optional[int] = Field(None, ge=1)
    k_max: int = Field(4, ge=1)


class EnvironmentSpec(BaseModel):
    benchmark: Optional[BenchmarkName] = None
    benchmark_seed: Optional[int] = None
    params: Optional[ParamsSpec] = None
    graph: Optional[GraphSpec] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.benchmark is None) == (self.params is None):
            raise ValueError("environment needs exactly one of 'benchmark' or 'params'")
        return self


class ExperimentConfig(BaseModel):
    name: str
    seed: int = Field(..., description="Master seed; every stage seed derives from it")
    output_dir: str
    environment: EnvironmentSpec
    data: DataSpec = Field(default_factory=DataSpec)
    identification: IdentificationSpec = Field(default_factory=IdentificationSpec)
    learning: TrainConfig = Field(default_factory=TrainConfig)
    policy: PolicyConfigSpec = Field(default_factory=PolicyConfigSpec)


class PolicyReport(BaseModel):
    greedy_mean: float
    greedy_stderr: float
    oracle_mean: float
    oracle_stderr: float
    final_return: float
    steps_to_90: Optional[int]


class RunReport(BaseModel):
    name: str
    seed: int
    config_hash: str
    true_asr: str
    learned_asr: str
    aligned_asr: Optional[str]
    asr_match: Optional[bool]
    identification_errors: Optional[Dict[str, float]]
    identification_diagnostics: Dict[str, Any]
    structure_f1: Optional[float]
    final_objective: Optional[float]
    cmi_table: Optional[List[Dict[str, Any]]]
    policy: Optional[PolicyReport]
    artifacts: Dict[str, str]
    wall_clock: Dict[str, float]


class EvalReport(BaseModel):
    policy: str
    episodes: int
    mean: float
    stderr: float
