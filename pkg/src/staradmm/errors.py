"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument or state violates a documented precondition."""


class NumericalFailure(RuntimeError):
    """A solver produced a non-finite value.

    Carries the inner iteration at which the value was observed.
    """

    def __init__(self, message, iteration):
        super().__init__(f"{message} (inner iteration {iteration})")
        self.iteration = iteration


class ProtocolViolation(RuntimeError):
    """A message violates the scheduler/worker protocol (e.g. duplicate update)."""


class DecodeError(ValueError):
    """A wire frame is malformed; the message names the violated field."""

    def __init__(self, field, detail=""):
        msg = field if not detail else f"{field}: {detail}"
        super().__init__(msg)
        self.field = field


class TransportFailure(RuntimeError):
    """A peer became unreachable mid-run."""


class RunAborted(RuntimeError):
    """The run fail-stopped; carries the reason and offending worker id."""

    def __init__(self, reason, worker_id=None):
        detail = reason if worker_id is None else f"{reason} (worker {worker_id})"
        super().__init__(detail)
        self.reason = reason
        self.worker_id = worker_id
