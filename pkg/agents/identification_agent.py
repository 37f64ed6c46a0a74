from .base_agent import BaseAgent
from typing import Dict, Any
from asr.identification import estimate_moments, identification_errors, recover_all


class IdentificationAgent(BaseAgent):
    """Recovers the identifiable model quantities from second-order moments"""

    def __init__(self):
        super().__init__("IdentificationAgent")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        self.require(context, 'batch', 'identification')
        spec = context['identification']
        moments = estimate_moments(context['batch'], spec['K'])
        d_state = spec.get('d_state')
        if d_state is None and context.get('params') is not None:
            d_state = context['params'].d_s
        identified = recover_all(moments, d_state=d_state, k_max=spec.get('k_max', 4))

        reasons = [
            f"Moments from {moments.n_samples} samples at lags 0..{moments.K}",
            f"Observation-space transition rank {identified.diagnostics['omega_rank']}, "
            f"condition {identified.diagnostics['omega_condition']:.2e}",
        ]
        errors = None
        if context.get('params') is not None:
            errors = identification_errors(identified, context['params'])
            worst = max(errors, key=errors.get)
            reasons.append(f"Largest recovery error: {worst} = {errors[worst]:.4f}")

        result = {
            'identified': identified,
            'identification_errors': errors,
            'reasons': reasons,
        }
        self.log_execution(context, result)
        return result
