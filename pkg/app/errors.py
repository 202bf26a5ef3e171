from typing import Any, Dict, List, Optional


class PlannerError(Exception):
    """Base class for every error raised by the planner services."""


class ProfileError(PlannerError):
    """A profile document could not be turned into a ModelProfile."""


class ParseError(ProfileError):
    """The profile document is not well-formed."""


class ValidationError(ProfileError):
    """A profile or search space breaks one of its invariants.

    `invariant` names the broken rule and `location` points at the offending
    component/layer (dotted path, e.g. ``backbones[0].layers[3].fwd_time``).
    """

    def __init__(self, message: str, invariant: str = "schema", location: Optional[str] = None):
        self.invariant = invariant
        self.location = location
        where = f" at {location}" if location else ""
        super().__init__(f"[{invariant}]{where}: {message}")


class ExtrapolationError(PlannerError):
    """A cost lookup fell outside the profiled batch-size range."""

    def __init__(self, batch: float, low: int, high: int):
        self.batch = batch
        self.low = low
        self.high = high
        super().__init__(f"batch {batch:g} outside profiled range [{low}, {high}]")


class InfeasibleError(PlannerError):
    """No partition satisfies the structural constraints of a plan point."""


class OracleTooLargeError(PlannerError):
    """The brute-force oracle was asked to enumerate an instance above its guards."""


class NoFeasiblePlanError(PlannerError):
    def __init__(self, message: str, diagnostics: Optional[List[Dict[str, Any]]] = None):
        self.diagnostics = diagnostics or []
        super().__init__(message)


class PlanDocumentError(PlannerError):
    """Reading or writing a plan/trace document failed."""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"{path}: {reason}")
