"""Exception hierarchy shared by the platform, the monitor and the harness."""


class ConfmonError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ConfmonError):
    pass


# hardware faults

class HardwareFault(ConfmonError):
    """An operation the simulated hardware refused."""


class AccessDenied(HardwareFault):
    pass


class OutOfRange(HardwareFault):
    pass


class Misaligned(HardwareFault):
    pass


class PrivilegeViolation(HardwareFault):
    pass


class PinnedInterrupt(HardwareFault):
    pass


class UnroutedInterrupt(HardwareFault):
    pass


class SeedLocked(HardwareFault):
    pass


# memory tracker

class TrackerError(ConfmonError):
    pass


class AlreadyInitialized(TrackerError):
    pass


class OutOfMemory(TrackerError):
    pass


class OutOfBounds(TrackerError):
    pass


class LinearityError(TrackerError):
    """A page token was used after it had been moved or consumed."""


class AlreadyMapped(TrackerError):
    pass


class NotMapped(TrackerError):
    pass


# boot and runtime

class BootSequenceError(ConfmonError):
    def __init__(self, step: str, reason: str):
        super().__init__(f"boot step {step!r} failed: {reason}")
        self.step = step
        self.reason = reason


class FsmError(ConfmonError):
    pass


class UnknownCause(FsmError):
    pass


class NoSavedState(FsmError):
    pass


class WrongExitNode(FsmError):
    pass


class IllegalTransition(FsmError):
    pass


class SmCallError(ConfmonError):
    """Raised by the Python-side call helpers when the monitor returns a
    non-zero status code. ``status`` carries the code the caller saw."""

    def __init__(self, status, message: str = ""):
        super().__init__(message or status.name)
        self.status = status


class UnknownDomain(SmCallError):
    pass


class DomainNotRunnable(SmCallError):
    pass


class DomainBusy(SmCallError):
    pass


class NotFromCvm(SmCallError):
    pass


class UndeclaredCall(SmCallError):
    pass


# harness

class ScriptError(ConfmonError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownFault(ConfmonError):
    pass


class StateSpaceBudgetExceeded(ConfmonError):
    def __init__(self, states_visited: int):
        super().__init__(f"state budget exceeded after {states_visited} states")
        self.states_visited = states_visited
