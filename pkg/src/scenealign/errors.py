"""Exception types shared across the package.

Anything derived from ScenealignError is a domain error: bad input data,
unsolvable instances, degenerate geometry.  The CLI maps these to exit
code 1 with a structured message; genuine bugs propagate as tracebacks.
"""


class ScenealignError(Exception):
    """Base class for domain errors."""


class FormatError(ScenealignError):
    """Malformed file contents (bad magic, truncation, invalid records)."""


class InvariantError(ScenealignError):
    """A container or parameter set violates its declared invariants."""


class UnsolvableError(ScenealignError):
    """An alignment/fit instance has no admissible solution."""


class DegenerateInputError(ScenealignError):
    """Input configuration is degenerate for the requested operation."""


class BehindCameraError(ScenealignError):
    """A 3D point with non-positive depth was passed to the projector."""


class MissingFieldError(ScenealignError):
    """A bundle is missing a field required by the requested operation."""

    def __init__(self, field: str):
        super().__init__(f"missing required bundle field: {field}")
        self.field = field
