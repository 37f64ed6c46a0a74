from .base_agent import BaseAgent
from typing import Dict, Any
import numpy as np
from asr.objective_learning import (
    Lambdas,
    LearnableModel,
    TrainConfig,
    aligned_asr,
    structure_f1,
    support_sensitivity,
    train,
)
from asr.structural_graph import indices_to_text


class RepresentationAgent(BaseAgent):
    """Learns coefficients and the ASR gate with the structured sequential objective"""

    def __init__(self):
        super().__init__("RepresentationAgent")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        self.require(context, 'batch', 'learning', 'seed')
        batch = context['batch']
        spec = context['learning']
        params = context.get('params')
        d_state = spec.get('d_state') or (params.d_s if params is not None else batch.d_o)

        actions = np.vstack([ep.actions for ep in batch])
        cov_a = np.atleast_2d(np.cov(actions, rowvar=False))
        model = LearnableModel.init_random(
            d_state, batch.d_o, batch.d_a, seed=context['seed'],
            lambdas=Lambdas(**spec['lambdas']), gamma=spec['gamma'], horizon=spec['horizon'], cov_a=cov_a,
        )
        cfg = TrainConfig(
            seed=context['seed'],
            iterations=spec['iterations'],
            lr=spec['lr'],
            gate_lr=spec['gate_lr'],
            segment_length=spec['segment_length'],
            segments_per_batch=spec['segments_per_batch'],
            structure_every=spec['structure_every'],
            support_threshold=spec['support_threshold'],
        )
        model, history = train(model, batch, cfg)
        learned = model.asr_set()

        reasons = [
            f"Learned ASR (model basis): {{{indices_to_text(learned)}}}",
            f"Structural ASR from supports: {{{indices_to_text(model.derived_asr(cfg.support_threshold))}}}",
        ]
        if not history.empty:
            reasons.append(f"Final objective {history['total'].iloc[-1]:.4f}")

        result = {
            'model': model,
            'history': history,
            'learned_asr': learned,
            'aligned_asr': None,
            'structure_f1': None,
            'sensitivity': support_sensitivity(model),
            'reasons': reasons,
        }
        if params is not None and params.d_s == d_state:
            result['aligned_asr'] = aligned_asr(model, params)
            result['structure_f1'] = structure_f1(model, params, cfg.support_threshold)
            reasons.append(f"Aligned ASR {{{indices_to_text(result['aligned_asr'])}}}, "
                           f"support F1 {result['structure_f1']:.3f}")

        self.log_execution(context, result)
        return result
