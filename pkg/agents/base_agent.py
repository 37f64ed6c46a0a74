from abc import ABC, abstractmethod
from typing import Dict, Any
from loguru import logger
from asr.errors import ModelValidationError


class BaseAgent(ABC):
    """Base interface for pipeline stages"""

    def __init__(self, name: str):
        self.name = name

    @abstractmethod
    def execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        """Run the stage and return its results"""
        pass

    def require(self, context: Dict[str, Any], *keys: str):
        """Fail early when an upstream stage did not populate the context"""
        missing = [k for k in keys if context.get(k) is None]
        if missing:
            raise ModelValidationError(f"{self.name} needs context keys {missing}")

    def log_execution(self, context: Dict[str, Any], result: Dict[str, Any]):
        """Log stage execution for traceability"""
        logger.info(f"Agent {self.name} executed with context keys: {sorted(context.keys())}")
        for reason in result.get('reasons', []):
            logger.debug(f"Agent {self.name}: {reason}")
