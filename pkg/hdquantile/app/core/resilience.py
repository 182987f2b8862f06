import logging
import math
from decimal import ROUND_CEILING, Decimal
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class HdQuantileError(Exception):
    exit_code = 2


class InputError(HdQuantileError):
    exit_code = 1


class ModelInputError(InputError):
    pass


class DataIngestionError(InputError):
    pass


class SolverError(HdQuantileError):
    exit_code = 2


class LassoError(SolverError):
    pass


class PilotBracketError(SolverError):
    pass


class VarianceError(SolverError):
    pass


class WeightSolverError(SolverError):
    """QP did not reach the KKT tolerance; carries the best iterate seen."""

    def __init__(self, message: str, best_iterate=None,
                 residuals: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.residuals = residuals or {}


class InfeasibleWeightsError(SolverError):
    def __init__(self, message: str, min_imbalance: float, c_last: float):
        super().__init__(message)
        self.min_imbalance = min_imbalance
        self.c_last = c_last


class StudyAbortedError(SolverError):
    pass


class StageError(SolverError):
    """A pipeline failure labelled with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception,
                 diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.diagnostics = diagnostics or {}
        self.exit_code = getattr(cause, "exit_code", 2)


class FailureBudget:
    """
    Circuit breaker over a batch of independent jobs.

    States:
    - CLOSED: failed fraction within budget, jobs keep running
    - OPEN: failed fraction above budget, the batch must stop
    """

    STATE_CLOSED = "closed"
    STATE_OPEN = "open"

    def __init__(self, name: str = "default", max_failure_fraction: float = 0.05,
                 total: int = 1):
        self.name = name
        self.max_failure_fraction = max_failure_fraction
        self.total = max(int(total), 1)
        self._failure_count = 0
        self._success_count = 0

    @property
    def state(self) -> str:
        if self._failure_count > self.max_failure_fraction * self.total:
            return self.STATE_OPEN
        return self.STATE_CLOSED

    @property
    def tripped(self) -> bool:
        return self.state == self.STATE_OPEN

    def record_success(self):
        self._success_count += 1

    def record_failure(self):
        self._failure_count += 1
        if self.tripped:
            logger.warning(
                f"[FAILURE-BUDGET:{self.name}] OPEN after {self._failure_count} failures "
                f"out of {self.total} planned jobs")

    def get_status(self) -> dict:
        return {
            "name": self.name,
            "state": self.state,
            "failure_count": self._failure_count,
            "success_count": self._success_count,
            "max_failure_fraction": self.max_failure_fraction,
            "total": self.total,
        }


def escalate_to(start: float, step: float, stop: float, needed: float) -> Optional[float]:
    """
    First value of the schedule start, start+step, ... that is >= needed, computed
    without walking it. start itself always counts, later values stop at stop;
    None when the schedule ends below needed.
    """
    if step <= 0:
        raise InputError(f"escalation step must be positive, got {step}")
    if needed <= start:
        return float(start)
    if not math.isfinite(needed):
        return None
    base = Decimal(str(start))
    increment = Decimal(str(step))
    steps = ((Decimal(repr(needed)) - base) / increment).to_integral_value(rounding=ROUND_CEILING)
    value = base + steps * increment
    if value > Decimal(str(stop)):
        return None
    return float(value)
