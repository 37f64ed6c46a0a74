from .base_agent import BaseAgent
from typing import Dict, Any
from asr.linear_env import LinearModelParams, simulate_batch


class SimulationAgent(BaseAgent):
    """Collects random-policy trajectories from the ground-truth environment"""

    def __init__(self):
        super().__init__("SimulationAgent")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        self.require(context, 'params', 'data', 'seed')
        params: LinearModelParams = context['params']
        data = context['data']
        batch = simulate_batch(params, episodes=data['episodes'], T=data['T'], seed=context['seed'])

        rewards = [float(r) for ep in batch for r in ep.rewards]
        result = {
            'batch': batch,
            'reasons': [
                f"{len(batch)} episodes of {data['T']} steps with i.i.d. actions",
                f"Spectral radius of the transition: {params.spectral_radius:.3f}",
                f"Mean reward {sum(rewards) / len(rewards):.4f}",
            ]
        }
        self.log_execution(context, result)
        return result
