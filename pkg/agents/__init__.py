from .base_agent import BaseAgent
from .simulation_agent import SimulationAgent
from .identification_agent import IdentificationAgent
from .structure_agent import StructureAgent
from .representation_agent import RepresentationAgent
from .policy_agent import PolicyAgent
from .orchestrator import PipelineOrchestrator, config_hash, stage_seed

__all__ = [
    "BaseAgent",
    "SimulationAgent",
    "IdentificationAgent",
    "StructureAgent",
    "RepresentationAgent",
    "PolicyAgent",
    "PipelineOrchestrator",
    "config_hash",
    "stage_seed",
]
