"""Exception hierarchy. Every error raised by the toolkit derives from RCAError."""

from __future__ import annotations

from dataclasses import dataclass


class RCAError(Exception):
    pass


class DomainError(RCAError, ValueError):
    """An argument is outside the domain of an operation."""


class ShapeMismatch(RCAError, ValueError):
    pass


class NonFinite(RCAError, ArithmeticError):
    pass


class NonFiniteLoss(NonFinite):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class EmptyInput(RCAError, ValueError):
    pass


class EmptyGrid(EmptyInput):
    pass


class EmptyDataset(EmptyInput):
    pass


class UnknownService(RCAError, KeyError):
    pass


class UnknownRoot(UnknownService):
    pass


class RootInAffected(RCAError, ValueError):
    pass


class RootNotRanked(RCAError, ValueError):
    pass


class InsufficientHistory(RCAError):
    pass


class IntervalOutOfRange(RCAError, ValueError):
    pass


class CheckpointMismatch(RCAError):
    pass


class ConfigError(RCAError, ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    kind: str
    case_id: str | None
    file: str | None
    line: int | None
    message: str

    def __str__(self):
        where = self.case_id or "<dataset>"
        if self.file:
            where += f":{self.file}"
            if self.line is not None:
                where += f":{self.line}"
        return f"[{self.kind}] {where}: {self.message}"


class DatasetError(RCAError):
    """Raised by dataset validation; carries every violation found, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [str(v) for v in self.violations[:20]]
        if len(self.violations) > 20:
            lines.append(f"... and {len(self.violations) - 20} more")
        super().__init__("\n".join(lines))


class MissingFile(DatasetError):
    pass


class SchemaViolation(DatasetError):
    pass


class LabelViolation(DatasetError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [Violation("LabelViolation", None, None, None, violations)]
        super().__init__(violations)


class ClockViolation(DatasetError):
    pass
