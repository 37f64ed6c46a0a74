from .base_agent import BaseAgent
from typing import Dict, Any
from loguru import logger
from asr.policy import (
    FixedActionPolicy,
    PolicyConfig,
    evaluate,
    oracle_action,
    run_dyna,
    run_model_free,
    steps_to_fraction,
)
from asr.structural_graph import indices_to_text


class PolicyAgent(BaseAgent):
    """Trains a Q policy on ASR beliefs and evaluates it greedily"""

    def __init__(self):
        super().__init__("PolicyAgent")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        self.require(context, 'params', 'model_params', 'asr', 'policy', 'seed')
        spec = dict(context['policy'])
        eval_episodes = spec.pop('eval_episodes')
        cfg = PolicyConfig(**spec)
        env_params = context['params']
        model_params = context['model_params']
        asr = context['asr']
        if not asr:
            logger.warning("Learned ASR is empty; falling back to the full latent state")
            asr = frozenset(range(model_params.d_s))

        runner = run_dyna if cfg.n_planning > 0 else run_model_free
        learning = runner(env_params, model_params, asr, cfg, seed=context['seed'])
        greedy = evaluate(learning.q, env_params, model_params, asr, cfg, eval_episodes, seed=context['seed'] + 1)
        oracle = FixedActionPolicy(oracle_action(env_params, cfg.action_set, cfg.gamma))
        reference = evaluate(oracle, env_params, model_params, asr, cfg, eval_episodes, seed=context['seed'] + 1)

        result = {
            'curve': learning.curve,
            'q': learning.q,
            'asr': asr,
            'policy_config': cfg,
            'evaluation': greedy,
            'oracle_evaluation': reference,
            'steps_to_90': steps_to_fraction(learning.curve, 0.9),
            'reasons': [
                f"Trained on ASR {{{indices_to_text(asr)}}} with n={cfg.n_planning} planning steps",
                f"Greedy return {greedy.mean:.3f} ± {greedy.stderr:.3f}",
                f"Oracle return {reference.mean:.3f} ± {reference.stderr:.3f}",
            ]
        }
        self.log_execution(context, result)
        return result
