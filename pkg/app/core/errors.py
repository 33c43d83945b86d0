from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by the lab."""


class DimensionMismatchError(LabError, ValueError):
    pass


class NonFiniteError(LabError, ValueError):
    pass


class UnderdeterminedTaskError(LabError, ValueError):
    pass


class IndexOutOfShardError(LabError, IndexError):
    pass


class PreconditionError(LabError, ValueError):
    pass


class InfeasibleRateError(LabError):
    """A commit rate leaves no time to train between two commits (Γ/ΔC ≤ O)."""


class InsufficientDataError(LabError, ValueError):
    pass


class FitFailure(LabError):
    """The loss samples do not follow the 1/t curve closely enough to yield a reward."""


class UnreachableLossError(LabError, ValueError):
    pass


class BudgetError(LabError):
    pass


class ConfigError(LabError):
    def __init__(self, message: str, field: str | None = None) -> None:
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class VerificationError(LabError):
    def __init__(self, failed: list[str]) -> None:
        self.failed = failed
        super().__init__("failed checks: " + ", ".join(failed))


__all__ = [
    "BudgetError",
    "ConfigError",
    "DimensionMismatchError",
    "FitFailure",
    "IndexOutOfShardError",
    "InfeasibleRateError",
    "InsufficientDataError",
    "LabError",
    "NonFiniteError",
    "PreconditionError",
    "UnderdeterminedTaskError",
    "UnreachableLossError",
    "VerificationError",
]
