import pytest
import sys
import json
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from agents import PipelineOrchestrator, SimulationAgent, StructureAgent
from asr.benchmarks import figure1_params
from asr.structural_graph import figure1_graph
from asr.errors import ModelValidationError, StageError
from cli.model_service import run_pipeline
from cli.schemas import ExperimentConfig


def small_config(output_dir: Path, **overrides) -> ExperimentConfig:
    data = {
        "name": "smoke",
        "seed": 0,
        "output_dir": str(output_dir),
        "environment": {"benchmark": "figure1"},
        "data": {"T": 300, "episodes": 4},
        "identification": {"K": 4, "d_state": 3},
        "learning": {"iterations": 2, "lr": 0.001, "gate_lr": 0.01, "horizon": 10,
                     "segment_length": 60, "segments_per_batch": 2},
        "policy": {"episodes": 0},
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


class TestPipeline:
    """Full pipeline on a short figure-1 run"""

    def test_run_without_policy(self, tmp_path):
        report = run_pipeline(small_config(tmp_path / "run"))

        assert report.true_asr == "2,3"
        assert report.policy is None
        assert report.aligned_asr is not None
        assert report.identification_errors is not None
        for name in report.artifacts.values():
            assert (tmp_path / "run" / name).exists(), name
        assert (tmp_path / "run" / "report.json").exists()
        assert {"simulate", "identify", "learn"} <= set(report.wall_clock)

    def test_rerun_is_deterministic(self, tmp_path):
        a = run_pipeline(small_config(tmp_path / "a")).model_dump(exclude={"wall_clock"})
        b = run_pipeline(small_config(tmp_path / "b")).model_dump(exclude={"wall_clock"})
        assert a == b
        assert (tmp_path / "a" / "model.json").read_text() == (tmp_path / "b" / "model.json").read_text()

    def test_report_on_disk_matches(self, tmp_path):
        report = run_pipeline(small_config(tmp_path / "run"))
        on_disk = json.loads((tmp_path / "run" / "report.json").read_text())
        assert on_disk["config_hash"] == report.config_hash
        assert on_disk["learned_asr"] == report.learned_asr

    def test_run_with_policy(self, tmp_path):
        config = small_config(
            tmp_path / "run",
            learning={"iterations": 0, "horizon": 10, "segment_length": 60, "segments_per_batch": 2},
            policy={"episodes": 2, "horizon": 20, "eval_episodes": 2, "minibatch": 4, "replay_capacity": 100},
        )
        report = run_pipeline(config)

        assert report.final_objective is None
        assert report.policy is not None
        assert "policy" in report.artifacts
        assert (tmp_path / "run" / "curve.csv").exists()

    def test_failing_stage_keeps_earlier_artifacts(self, tmp_path):
        config = small_config(tmp_path / "run", identification={"K": 400, "d_state": 3})
        orchestrator = PipelineOrchestrator(tmp_path / "run")
        with pytest.raises(StageError) as excinfo:
            orchestrator.run_pipeline(config.model_dump())
        assert excinfo.value.stage == "identify"
        assert (tmp_path / "run" / "trajectories.jsonl").exists()


class TestAgents:

    def test_missing_upstream_context(self):
        with pytest.raises(ModelValidationError):
            SimulationAgent().execute({'data': {'T': 10, 'episodes': 1}, 'seed': 0})

    def test_simulation_agent_reports(self):
        result = SimulationAgent().execute({'params': figure1_params(), 'data': {'T': 10, 'episodes': 2}, 'seed': 0})
        assert len(result['batch']) == 2
        assert len(result['reasons']) == 3

    def test_structure_agent_skips_dsep_without_discount(self):
        result = StructureAgent().execute({'graph': figure1_graph(), 'learning': {'gamma': 0.0, 'horizon': 5}})
        assert result['true_asr'] == frozenset({1, 2})
        assert result['reasons'][-1] == "d-separation check skipped: gamma = 0"

    def test_structure_agent_cross_checks(self):
        result = StructureAgent().execute({'graph': figure1_graph(), 'learning': {'gamma': 0.8, 'horizon': 5}})
        assert result['reasons'][-1] == "ASR by d-separation: {2,3}"


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
