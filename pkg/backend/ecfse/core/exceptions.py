# Error types raised by ecfse services
from typing import Any


class EcfseError(Exception):
    """Base class for all ecfse errors"""

    def details(self) -> dict[str, Any]:
        return {}


class CaseFormatError(EcfseError):
    """Syntax error in a case file"""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column

    def details(self) -> dict[str, Any]:
        return {"line": self.line, "column": self.column}


class NetworkValidationError(EcfseError):
    """Semantically invalid network (dangling endpoint, islands, ...)"""


class AllocationError(EcfseError):
    """Device counts cannot be placed on the network"""


class MeasurementError(EcfseError):
    """Measurement records that cannot be turned into a circuit"""


class ConvergenceError(EcfseError):
    """Power flow did not reach the requested tolerance"""

    def __init__(self, message: str, iterations: int, max_mismatch: float):
        super().__init__(message)
        self.iterations = iterations
        self.max_mismatch = max_mismatch

    def details(self) -> dict[str, Any]:
        return {"iterations": self.iterations, "max_mismatch": self.max_mismatch}


class ObservabilityError(EcfseError):
    """KKT matrix is singular: unobservable system or redundant constraints"""

    def __init__(self, message: str, suspect_buses: list[int] | None = None):
        super().__init__(message)
        self.suspect_buses = suspect_buses or []

    def details(self) -> dict[str, Any]:
        return {"suspect_buses": self.suspect_buses}


class TrialError(EcfseError):
    """A Monte Carlo trial failed; carries what is needed to replay it"""

    def __init__(self, trial_id: int, seed: int, cause: Exception):
        super().__init__(f"trial {trial_id} (seed {seed}) failed: {cause}")
        self.trial_id = trial_id
        self.seed = seed
        self.cause = cause

    def details(self) -> dict[str, Any]:
        return {"trial_id": self.trial_id, "seed": self.seed, "cause": type(self.cause).__name__}


class ArtifactError(EcfseError):
    """Missing, unreadable or schema-invalid artifact file"""

    def __init__(self, message: str, path: str):
        super().__init__(f"{path}: {message}")
        self.path = path

    def details(self) -> dict[str, Any]:
        return {"path": self.path}
