"""Exception hierarchy for the engine."""


class TandemError(Exception):
    """Base class for all engine errors."""


class IngestError(TandemError):
    """Malformed input during table ingestion (carries a line number when known)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(TandemError):
    """Unknown column, arity mismatch, or incompatible schemas."""


class PlanError(TandemError):
    """Structurally unusable plan document (parse failure, empty plan list)."""


class CostModelError(TandemError):
    """Degenerate statistics or a missing per-step estimate."""


class CalibrationError(TandemError):
    """Calibration workload too small or a degenerate fit."""


class ExecutionError(TandemError):
    """Relational evaluation failure (type mismatch, bad params)."""


class BudgetError(TandemError):
    """Token budget too small for even a single row."""


class BackendError(TandemError):
    """Semantic backend call failed after retries."""


class ContractViolation(BackendError):
    """Backend response broke the wire contract (bad indices, wrong arity, alien columns)."""


class PlanningError(TandemError):
    """No valid plan survived decomposition, or instruction compilation exhausted retries."""
