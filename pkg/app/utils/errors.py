"""Exception hierarchy shared by the simulation services and the command line."""
from typing import List, Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class QuantumThermoError(Exception):
    """Base error. ``module`` names the library layer that raised it."""

    module = "core"
    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, module: Optional[str] = None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self) -> str:
        return f"{self.module}: {self.args[0]}"


class ConfigValidationError(QuantumThermoError):
    module = "cli"
    exit_code = EXIT_VALIDATION

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "invalid configuration")


class NumericalError(QuantumThermoError):
    pass


class NotHermitianError(NumericalError):
    module = "quantum-core"


class NotUnitaryError(NumericalError):
    module = "quantum-core"


class NotPositiveDefiniteError(NumericalError):
    module = "channels"


class PositivityError(NumericalError):
    module = "quantum-core"


class SupportError(NumericalError):
    module = "quantum-core"


class DegenerateSpectrumError(NumericalError):
    module = "trajectories"


class CompletenessError(NumericalError):
    module = "channels"


class InconsistentEntropyAssignmentError(NumericalError):
    module = "channels"


class NoFixedPointError(NumericalError):
    module = "channels"


class LadderConditionError(NumericalError):
    module = "channels"


class BackwardInvarianceError(NumericalError):
    module = "channels"


class EnumerationCapError(NumericalError):
    module = "trajectories"


class StepSizeError(NumericalError):
    module = "lindblad"


class TruncationError(NumericalError):
    module = "models"


class MissingEntropyAssignmentError(QuantumThermoError):
    module = "channels"


class ProcessDefinitionError(QuantumThermoError):
    """Inputs that are well-typed but describe an impossible process."""

    module = "trajectories"
