"""Exception hierarchy shared by every layer of the pager."""


class RemoteMemError(Exception):
    pass


class ContractViolation(RemoteMemError):
    """A caller broke an operation's precondition (bad state transition, etc)."""


class TransportError(RemoteMemError):
    """The backing store could not be reached or answered garbage.

    ``applied`` is the number of leading batch items known to have been
    stored before the failure (only meaningful for multi-writes).
    """

    def __init__(self, message, applied=0):
        super().__init__(message)
        self.applied = applied


class FaultResolutionError(RemoteMemError):
    """A page fault could not be resolved; the faulting access must not proceed."""


class TraceParseError(RemoteMemError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Unavailable(RemoteMemError):
    """The platform lacks a facility (e.g. userfaultfd) needed by an optional feature."""
