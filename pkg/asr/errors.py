"""Exception hierarchy shared by the library, the pipeline agents and the CLI."""


class AsrError(Exception):
    """Base class for every error raised by the asr package"""


class ModelValidationError(AsrError, ValueError):
    """Inputs violate a documented precondition (shapes, masks, ranges, stationarity)"""


class IdentifiabilityError(AsrError):
    """Second-order statistics do not pin down the requested quantity"""


class NumericalError(AsrError):
    """A computation produced a singular system or a non-finite value"""


class DivergenceError(NumericalError):
    """Iterative learning left the finite range"""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class StageError(AsrError):
    """A pipeline stage failed; carries the stage name for the report"""

    def __init__(self, stage: str, diagnostic: str):
        super().__init__(f"stage '{stage}' failed: {diagnostic}")
        self.stage = stage
        self.diagnostic = diagnostic
