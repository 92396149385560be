"""Exception taxonomy for the engine.

Every error raised on a contract violation derives from :class:`DeskdiffError`
so callers (and the CLI) can distinguish engine failures from bugs in the
surrounding code.
"""

from __future__ import annotations


class DeskdiffError(Exception):
    """Base class for all engine errors."""


class ParameterError(DeskdiffError, ValueError):
    """A caller-supplied value violates a documented precondition."""


class DegenerateGridError(ParameterError):
    """A timestep grid contains a repeated or non-decreasing step."""


class FormatError(DeskdiffError, ValueError):
    """A binary or text payload does not parse as the declared format."""


class StaleCacheError(DeskdiffError):
    """A latent cache was produced under a different schedule or model."""


class SetupError(DeskdiffError):
    """A required external input (weights file, input field) is missing."""


class PipelineError(DeskdiffError, RuntimeError):
    """A pipeline stage failed after validation succeeded."""


class InternalError(DeskdiffError, AssertionError):
    """An internal invariant failed; indicates a bug, not caller error."""
