"""Exception types shared across the package."""


class RwsegError(Exception):
    """Base class for all package errors."""


class FormatError(RwsegError):
    """Malformed or inconsistent file content."""


class ValidationError(RwsegError):
    """A domain invariant was violated."""


class SolverError(RwsegError):
    """A solver failed (singular system, non-convergence, misconfiguration)."""
