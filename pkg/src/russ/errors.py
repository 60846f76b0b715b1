"""Exception types shared across the runtime."""


class RussError(Exception):
    """Base class for all errors raised by this package."""


# --- guideline store ---

class FormatError(RussError):
    """Guideline document is not well-formed (bad encoding or bad JSON)."""


class SchemaError(RussError):
    """Guideline document violates the guideline schema or an invariant."""


class ToolReferenceError(RussError):
    """A step's reference call names a tool unknown to the registry."""


class EmptyStoreError(RussError):
    """Retrieval was asked to rank an empty guideline store."""


# --- tool registry ---

class UnknownToolError(RussError):
    """Tool call names a tool that is not registered."""


# --- simulated world ---

class UnknownFixtureError(RussError):
    """No scene fixture with the requested id."""


class UnknownLandmarkError(RussError):
    """Landmark name not present in the world's landmark table."""


class DegenerateTrajectoryError(RussError):
    """Trajectory endpoints coincide."""


class UnknownTrajectoryError(RussError):
    """Trajectory reference does not resolve to a planned trajectory."""


class SpeedOutOfRangeError(RussError):
    """Motion speed outside the permitted range."""


class ProbeNotPlacedError(RussError):
    """Contact adjustment requested before the probe was ever positioned."""


class UnknownSweepError(RussError):
    """Sweep reference does not resolve to a recorded sweep."""


class RefineImpossibleError(RussError):
    """Refinement requested but the organ was not visible in the sweep."""


class NoSweepYetError(RussError):
    """Operation needs a recorded sweep and none exists."""


# --- agent core ---

class MalformedResponseError(RussError):
    """Policy response does not match the <think>...</think><tool>...</tool> grammar."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class NoCurrentStepError(RussError):
    """Rendered context carries no current-step marker."""


class ReplayDivergenceError(RussError):
    """Replayed tool results diverge from the recorded trace."""

    def __init__(self, turn_index: int, detail: str = ""):
        msg = f"replay diverged at turn {turn_index}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.turn_index = turn_index


# --- policy backends ---

class EndpointUnreachableError(RussError):
    """Remote endpoint could not be reached after all retries."""


class BadStatusError(RussError):
    """Remote endpoint answered with a non-retryable error status."""

    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"endpoint returned status {code}" + (f": {detail}" if detail else ""))
        self.code = code


class BadPayloadError(RussError):
    """Remote endpoint answered with a payload the client cannot use."""


class RequestTimeoutError(RussError):
    """Remote request exceeded its timeout on every attempt."""


class PortInUseError(RussError):
    """Stub server could not bind its port."""


# --- reward / evaluation ---

class ReferenceInvalidError(RussError):
    """Reference tool call fails schema validation; scoring is undefined."""


class UnknownStepIndexError(RussError):
    """Trace turn references a step index outside the guideline."""


class EmptyInputError(RussError):
    """Aggregation over an empty metrics list."""
