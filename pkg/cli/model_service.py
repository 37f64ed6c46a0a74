"""File-level services behind the CLI subcommands."""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from loguru import logger

from agents.orchestrator import PipelineOrchestrator
from asr import objective_learning, policy as policy_lib
from asr.artifacts import (
    json_ready,
    load_policy,
    read_json,
    read_trajectories,
    save_policy,
    write_csv,
    write_json,
    write_trajectories,
)
from asr.benchmarks import make_benchmark as build_benchmark
from asr.errors import ModelValidationError
from asr.identification import estimate_moments, recover_all
from asr.linear_env import LinearModelParams, simulate_batch
from asr.structural_graph import asr_by_dsep, asr_indices, indices_from_text, indices_to_text
from .schemas import (
    EvalReport,
    ExperimentConfig,
    GraphSpec,
    ParamsSpec,
    PolicyConfigSpec,
    RunReport,
    TrainConfig,
)


def load_params(path: Path) -> LinearModelParams:
    """Ground-truth params JSON, or a learned model JSON reduced to its params"""
    data = read_json(path)
    if "gate_logits" in data:
        return objective_learning.LearnableModel.from_dict(data).to_params()
    return ParamsSpec.model_validate(data).to_params()


def load_config(path: Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text())


def simulate(params_path: Path, T: int, episodes: int, seed: int, out: Path) -> Dict[str, Any]:
    try:
        params = load_params(params_path)
        batch = simulate_batch(params, episodes=episodes, T=T, seed=seed)
        write_trajectories(out, batch)
        return {"episodes": len(batch), "T": T, "output": str(out)}
    except Exception as e:
        logger.error(f"Error in simulate: {e}")
        raise


def identify(data_path: Path, K: int, d_state: Optional[int], k_max: int, out: Path) -> Dict[str, Any]:
    try:
        batch = read_trajectories(data_path)
        identified = recover_all(estimate_moments(batch, K), d_state=d_state, k_max=k_max)
        write_json(out, json_ready(identified.to_dict()))
        return {"omega_rank": int(identified.diagnostics["omega_rank"]), "output": str(out)}
    except Exception as e:
        logger.error(f"Error in identify: {e}")
        raise


def characterize_asr(graph_path: Path, gamma: float) -> Dict[str, Any]:
    try:
        graph = GraphSpec.model_validate(read_json(graph_path)).to_graph()
        fixpoint = asr_indices(graph)
        by_dsep = asr_by_dsep(graph, horizon=graph.d_s + 3, gamma=gamma)
        if fixpoint != by_dsep:
            logger.warning("Fixpoint and d-separation characterizations disagree")
        return {"asr": indices_to_text(fixpoint), "asr_dsep": indices_to_text(by_dsep)}
    except Exception as e:
        logger.error(f"Error in asr: {e}")
        raise


def learn(data_path: Path, config_path: Optional[Path], seed: int, out: Path, d_state: Optional[int] = None,
          history_out: Optional[Path] = None) -> Dict[str, Any]:
    try:
        batch = read_trajectories(data_path)
        spec = TrainConfig.model_validate(read_json(config_path)) if config_path else TrainConfig()
        if d_state is not None:
            spec = spec.model_copy(update={"d_state": d_state})
        if spec.d_state is None:
            raise ModelValidationError("the learned state dimension is required (--dstate or config d_state)")
        actions = np.vstack([ep.actions for ep in batch])
        model = objective_learning.LearnableModel.init_random(
            spec.d_state, batch.d_o, batch.d_a, seed=seed,
            lambdas=spec.lambdas.to_lambdas(), gamma=spec.gamma, horizon=spec.horizon,
            cov_a=np.atleast_2d(np.cov(actions, rowvar=False)),
        )
        cfg = objective_learning.TrainConfig(
            seed=seed, **spec.model_dump(exclude={"d_state", "lambdas", "gamma", "horizon"}))
        model, history = objective_learning.train(model, batch, cfg)
        write_json(out, model.to_dict())
        if history_out is not None:
            write_csv(history_out, history)
        return {"learned_asr": indices_to_text(model.asr_set()), "output": str(out)}
    except Exception as e:
        logger.error(f"Error in learn: {e}")
        raise


def train_policy(env_params_path: Path, model_path: Path, asr_text: Optional[str], config_path: Optional[Path],
                 seed: int, curve_out: Path, policy_out: Path) -> Dict[str, Any]:
    try:
        env_params = load_params(env_params_path)
        model_params = load_params(model_path)
        spec = PolicyConfigSpec.model_validate(read_json(config_path)) if config_path else PolicyConfigSpec()
        cfg = spec.to_policy_config()
        asr = indices_from_text(asr_text, model_params.d_s) if asr_text else frozenset(range(model_params.d_s))
        runner = policy_lib.run_dyna if cfg.n_planning > 0 else policy_lib.run_model_free
        result = runner(env_params, model_params, asr, cfg, seed)
        write_csv(curve_out, result.curve)
        save_policy(policy_out, {
            "q": result.q,
            "asr": sorted(asr),
            "policy_config": spec.model_dump(),
            "model_params": model_params.to_dict(),
        })
        return {"final_return": float(result.curve["return"].iloc[-1]) if len(result.curve) else None,
                "curve": str(curve_out), "policy": str(policy_out)}
    except Exception as e:
        logger.error(f"Error in train-policy: {e}")
        raise


def eval_policy(env_params_path: Path, policy_path: Path, episodes: int, seed: int,
                oracle: bool = False) -> EvalReport:
    try:
        env_params = load_params(env_params_path)
        bundle = load_policy(policy_path)
        spec = PolicyConfigSpec.model_validate(bundle["policy_config"])
        cfg = spec.to_policy_config()
        model_params = LinearModelParams.from_dict(bundle["model_params"])
        if oracle:
            chosen = policy_lib.FixedActionPolicy(policy_lib.oracle_action(env_params, cfg.action_set, cfg.gamma))
        else:
            chosen = bundle["q"]
        result = policy_lib.evaluate(chosen, env_params, model_params, bundle["asr"], cfg, episodes, seed)
        return EvalReport(policy="oracle" if oracle else "greedy", episodes=episodes,
                          mean=result.mean, stderr=result.stderr)
    except Exception as e:
        logger.error(f"Error in eval: {e}")
        raise


def run_pipeline(config: ExperimentConfig) -> RunReport:
    try:
        orchestrator = PipelineOrchestrator(Path(config.output_dir))
        report = RunReport.model_validate(orchestrator.run_pipeline(config.model_dump()))
        write_json(Path(config.output_dir) / "report.json", report.model_dump())
        return report
    except Exception as e:
        logger.error(f"Error in pipeline: {e}")
        raise


def make_benchmark(name: str, seed: int, out_dir: Path) -> ExperimentConfig:
    """Write config.json, true_params.json and graph.json for a named benchmark"""
    try:
        bench = build_benchmark(name, seed)
        d = bench.defaults
        config = ExperimentConfig(
            name=name,
            seed=seed,
            output_dir=str(Path(out_dir) / "run"),
            environment={"benchmark": name, "benchmark_seed": seed},
            data=d["data"],
            identification=d["identification"],
            learning=d["learning"],
            policy=d["policy"],
        )
        out_dir = Path(out_dir)
        write_json(out_dir / "config.json", config.model_dump())
        write_json(out_dir / "true_params.json", bench.params.to_dict())
        write_json(out_dir / "graph.json", bench.graph.to_dict())
        return config
    except Exception as e:
        logger.error(f"Error in benchmark: {e}")
        raise


def _sweep_one(name: str, seed: int, out_dir: str) -> Dict[str, Any]:
    config = make_benchmark(name, seed, Path(out_dir) / f"seed_{seed}")
    report = run_pipeline(config)
    row = {"seed": seed, "true_asr": report.true_asr, "learned_asr": report.learned_asr,
           "aligned_asr": report.aligned_asr, "asr_match": report.asr_match, "structure_f1": report.structure_f1}
    if report.policy is not None:
        row.update({"greedy_mean": report.policy.greedy_mean, "oracle_mean": report.policy.oracle_mean})
    return row


def sweep(name: str, seeds: Sequence[int], jobs: int, out_dir: Path) -> pd.DataFrame:
    """Independent pipelines for several seeds in parallel processes"""
    rows: List[Dict[str, Any]] = Parallel(n_jobs=jobs)(
        delayed(_sweep_one)(name, int(s), str(out_dir)) for s in seeds
    )
    frame = pd.DataFrame(rows).sort_values("seed").reset_index(drop=True)
    write_csv(Path(out_dir) / "sweep_summary.csv", frame)
    logger.info(f"Sweep '{name}' over {len(seeds)} seeds finished")
    return frame


