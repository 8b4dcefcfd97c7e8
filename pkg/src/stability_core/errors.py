from typing import Dict, Any, Optional


class StabilityError(Exception):
    """Base class for numerical failures raised by the toolkit"""
    code = "StabilityError"

    def to_status(self) -> Dict[str, Any]:
        return {"status": "error", "error": self.code, "message": str(self)}


class InvalidParameters(StabilityError, ValueError):
    code = "InvalidParameters"


class OverflowRange(StabilityError):
    code = "OverflowRange"


class BranchPrecondition(StabilityError):
    code = "BranchPrecondition"


class MarginalDegenerate(StabilityError):
    code = "MarginalDegenerate"


class RadiusExhausted(StabilityError):
    code = "RadiusExhausted"


class NoConvergence(StabilityError):
    code = "NoConvergence"


class DerivativeVanishes(StabilityError):
    code = "DerivativeVanishes"


class SingularStepMatrix(StabilityError):
    code = "SingularStepMatrix"


class NonFiniteState(StabilityError):
    code = "NonFiniteState"

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class InsufficientData(StabilityError):
    code = "InsufficientData"


class NoKernelConvergence(StabilityError):
    code = "NoKernelConvergence"

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class MeshMismatch(StabilityError):
    code = "MeshMismatch"


def error_status(exc: Exception) -> Dict[str, Any]:
    """Convert any exception into the dispatcher's status dictionary"""
    if isinstance(exc, StabilityError):
        return exc.to_status()
    return {"status": "error", "error": type(exc).__name__, "message": str(exc)}
