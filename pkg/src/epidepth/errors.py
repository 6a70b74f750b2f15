"""Exception types shared across the package.

Argument and configuration problems raise plain ValueError.  Runtime
failures get dedicated classes so callers can tell a numeric blow-up from a
degenerate solve or an unsatisfiable generation request.
"""


class ComputationError(RuntimeError):
    """A numeric stage produced non-finite values or was applied out of order."""


class SolverError(RuntimeError):
    """An iterative or linear solve hit a degenerate configuration."""


class GenerationError(RuntimeError):
    """Procedural scene generation could not satisfy its constraints."""
