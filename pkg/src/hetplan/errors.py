"""Exception hierarchy; the CLI maps each class to an exit code."""


class HetplanError(Exception):
    exit_code = 5


class SpecError(HetplanError, ValueError):
    """Malformed or inconsistent input document."""
    exit_code = 2


class ProfileError(SpecError):
    """Missing or inconsistent profile-table entry."""


class InfeasibleError(HetplanError):
    """No assignment satisfies the constraints.

    ``reasons`` maps a candidate label (e.g. a TP dimension) to the binding
    constraint that rejected it.
    """
    exit_code = 3

    def __init__(self, message, reasons=None):
        super().__init__(message)
        self.reasons = dict(reasons or {})


class UnrecoverableError(HetplanError):
    """A checkpoint shard exists in no reachable location."""
    exit_code = 4


class DigestMismatch(UnrecoverableError):
    pass


class InvariantViolation(HetplanError, AssertionError):
    exit_code = 5
