from typing import Dict, Any, Callable
from dataclasses import asdict
from pathlib import Path
import hashlib
import json
import time
from loguru import logger
from asr.artifacts import json_ready, save_policy, write_csv, write_json, write_trajectories
from asr.benchmarks import make_benchmark
from asr.errors import StageError
from asr.linear_env import LinearModelParams
from asr.structural_graph import StructuralGraph, indices_to_text
from .simulation_agent import SimulationAgent
from .identification_agent import IdentificationAgent
from .structure_agent import StructureAgent
from .representation_agent import RepresentationAgent
from .policy_agent import PolicyAgent


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed derived from the master seed and the stage name"""
    digest = hashlib.sha256(f"{master}:{stage}".encode()).hexdigest()
    return int(digest, 16) % 2**32


def config_hash(config: Dict[str, Any]) -> str:
    payload = {k: v for k, v in config.items() if k != 'output_dir'}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class PipelineOrchestrator:
    """Runs simulate -> identify -> learn -> train-policy -> eval, persisting every stage"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.simulation_agent = SimulationAgent()
        self.structure_agent = StructureAgent()
        self.identification_agent = IdentificationAgent()
        self.representation_agent = RepresentationAgent()
        self.policy_agent = PolicyAgent()
        self.wall_clock: Dict[str, float] = {}

    def _stage(self, name: str, fn: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}")
            raise StageError(name, str(e)) from e
        self.wall_clock[name] = round(time.perf_counter() - start, 3)
        return result

    def _resolve_environment(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Ground-truth params and graph from explicit specs or a named benchmark"""
        env = config['environment']
        if env.get('params') is not None:
            params = LinearModelParams.from_dict(env['params'])
            if env.get('graph') is not None:
                graph = StructuralGraph.from_dict(env['graph'])
            else:
                graph = StructuralGraph.from_supports(params.C_s_to_o, params.C_s_to_r, params.C_a_to_r,
                                                      params.C_s, params.C_a_to_s, threshold=0.0)
        else:
            seed = env.get('benchmark_seed')
            bench = make_benchmark(env['benchmark'], config['seed'] if seed is None else seed)
            params, graph = bench.params, bench.graph
        params.require_stationary()
        return {'params': params, 'graph': graph}

    def run_pipeline(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """Execute every stage in order and return the run report"""
        out = self.output_dir
        out.mkdir(parents=True, exist_ok=True)
        master = config['seed']
        logger.info(f"Pipeline '{config['name']}' starting (seed={master}, output={out})")

        # Step 1: Ground truth
        context = self._stage("environment", lambda: self._resolve_environment(config))
        context.update({k: config[k] for k in ('data', 'identification', 'learning', 'policy')})
        write_json(out / "true_params.json", context['params'].to_dict())
        write_json(out / "graph.json", context['graph'].to_dict())
        artifacts = {'true_params': "true_params.json", 'graph': "graph.json"}

        # Step 2: Data collection with a random policy
        sim = self._stage("simulate", lambda: self.simulation_agent.execute(
            {**context, 'seed': stage_seed(master, "simulate")}))
        context['batch'] = sim['batch']
        write_trajectories(out / "trajectories.jsonl", sim['batch'])
        artifacts['trajectories'] = "trajectories.jsonl"

        # Step 3: Ground-truth ASR and population CMI
        structure = self._stage("structure", lambda: self.structure_agent.execute(context))
        if structure['cmi_table'] is not None:
            write_csv(out / "cmi_table.csv", structure['cmi_table'])
            artifacts['cmi_table'] = "cmi_table.csv"

        # Step 4: Moment-based identification
        ident = self._stage("identify", lambda: self.identification_agent.execute(context))
        write_json(out / "identified.json", json_ready(ident['identified'].to_dict()))
        artifacts['identified'] = "identified.json"

        # Step 5: Representation learning
        learn = self._stage("learn", lambda: self.representation_agent.execute(
            {**context, 'seed': stage_seed(master, "learn")}))
        write_json(out / "model.json", learn['model'].to_dict())
        write_csv(out / "loss_history.csv", learn['history'])
        artifacts['model'] = "model.json"
        artifacts['loss_history'] = "loss_history.csv"

        true_asr = structure['true_asr']
        report: Dict[str, Any] = {
            'name': config['name'],
            'seed': master,
            'config_hash': config_hash(config),
            'true_asr': indices_to_text(true_asr),
            'learned_asr': indices_to_text(learn['learned_asr']),
            'aligned_asr': None if learn['aligned_asr'] is None else indices_to_text(learn['aligned_asr']),
            'asr_match': None if learn['aligned_asr'] is None else learn['aligned_asr'] == true_asr,
            'identification_errors': ident['identification_errors'],
            'identification_diagnostics': json_ready(ident['identified'].diagnostics),
            'structure_f1': learn['structure_f1'],
            'final_objective': None if learn['history'].empty else float(learn['history']['total'].iloc[-1]),
            'cmi_table': None if structure['cmi_table'] is None else json_ready(structure['cmi_table'].to_dict(orient='records')),
            'policy': None,
        }

        # Step 6: Policy learning and evaluation on the learned ASR
        if config['policy']['episodes'] > 0:
            policy = self._stage("train-policy", lambda: self.policy_agent.execute({
                **context,
                'model_params': learn['model'].to_params(),
                'asr': learn['learned_asr'],
                'seed': stage_seed(master, "train-policy"),
            }))
            write_csv(out / "curve.csv", policy['curve'])
            save_policy(out / "policy.joblib", {
                'q': policy['q'],
                'asr': sorted(policy['asr']),
                'policy_config': asdict(policy['policy_config']),
                'model_params': learn['model'].to_params().to_dict(),
            })
            artifacts['curve'] = "curve.csv"
            artifacts['policy'] = "policy.joblib"
            report['policy'] = {
                'greedy_mean': policy['evaluation'].mean,
                'greedy_stderr': policy['evaluation'].stderr,
                'oracle_mean': policy['oracle_evaluation'].mean,
                'oracle_stderr': policy['oracle_evaluation'].stderr,
                'final_return': float(policy['curve']['return'].iloc[-1]),
                'steps_to_90': policy['steps_to_90'],
            }
        else:
            logger.info("Policy episodes set to 0; skipping policy learning")

        report['artifacts'] = artifacts
        report['wall_clock'] = dict(self.wall_clock)
        logger.info(f"Pipeline complete: true ASR {{{report['true_asr']}}}, learned {{{report['learned_asr']}}}")
        return report


