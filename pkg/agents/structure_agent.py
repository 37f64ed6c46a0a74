from .base_agent import BaseAgent
from typing import Dict, Any
from loguru import logger
from asr.objective_learning import population_cmi_table
from asr.structural_graph import asr_by_dsep, asr_indices, indices_to_text


class StructureAgent(BaseAgent):
    """Characterizes the ground-truth ASR from the structural graph"""

    def __init__(self):
        super().__init__("StructureAgent")

    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        self.require(context, 'graph', 'learning')
        graph = context['graph']
        learning = context['learning']
        fixpoint = asr_indices(graph)
        reasons = [f"ASR by parent fixpoint: {{{indices_to_text(fixpoint)}}}"]
        if learning['gamma'] > 0:
            # long enough for influence to pass through every state dim before reaching the return
            by_dsep = asr_by_dsep(graph, horizon=graph.d_s + 3, gamma=learning['gamma'])
            if fixpoint != by_dsep:
                logger.warning(f"Fixpoint ASR {indices_to_text(fixpoint)} and d-separation ASR "
                               f"{indices_to_text(by_dsep)} disagree")
            reasons.append(f"ASR by d-separation: {{{indices_to_text(by_dsep)}}}")
        else:
            reasons.append("d-separation check skipped: gamma = 0")

        cmi_table = None
        if context.get('params') is not None:
            cmi_table = population_cmi_table(context['params'], fixpoint, learning['horizon'], learning['gamma'])

        result = {
            'true_asr': fixpoint,
            'cmi_table': cmi_table,
            'reasons': reasons,
        }
        self.log_execution(context, result)
        return result
