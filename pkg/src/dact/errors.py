"""Exception hierarchy. Every error carries a category used by the CLI."""


class DactError(Exception):
    category = "error"


class ValidationError(DactError, ValueError):
    category = "validation"


class DegenerateDataError(ValidationError):
    category = "degenerate-data"


class DomainError(DactError, ValueError):
    category = "domain"


class IncompleteChunkError(DactError, ValueError):
    category = "incomplete-chunk"


class ConfigError(DactError, ValueError):
    category = "config"


class TrainingDivergenceError(DactError, FloatingPointError):
    category = "training-divergence"


class ModelContractError(DactError):
    category = "model-contract"


class CoverageError(DactError, KeyError):
    category = "coverage"

    def __str__(self):  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class InvariantViolation(DactError, AssertionError):
    """An internal invariant failed. ``invariant`` names which one."""

    category = "invariant"

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"invariant violated: {invariant}" + (f" ({detail})" if detail else ""))


class ChecksumError(ValidationError):
    category = "checksum"
