"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so scripted pipelines can branch on
failure category without parsing messages.
"""


class LatentDtrError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ValidationError(LatentDtrError):
    """Malformed inputs: bad shapes, broken invariants, schema mismatches."""

    exit_code = 2


class NumericalError(LatentDtrError):
    """Numerical failure: underflow, singular systems, non-SPD covariances."""

    exit_code = 3


class ArtifactError(LatentDtrError):
    """I/O failure: missing, unreadable, or unwritable artifact files."""

    exit_code = 4


class DegenerateObservationError(NumericalError):
    """All-zero likelihood at a filtering step; carries the visit index."""

    def __init__(self, visit: int, subject=None):
        self.visit = visit
        self.subject = subject
        where = f" (subject {subject})" if subject is not None else ""
        super().__init__(f"zero likelihood at visit {visit}{where}")


class IllPosedError(NumericalError):
    """Linear system too ill-conditioned to solve reliably."""
