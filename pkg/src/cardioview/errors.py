"""Exception types shared across the package.

The CLI maps these onto exit codes: format/contract problems exit 1,
numeric faults exit 2.
"""


class FormatError(ValueError):
    """A file on disk does not match its declared format."""


class GenerationError(RuntimeError):
    """A phantom spec produced degenerate geometry."""


class EpisodeError(RuntimeError):
    """Environment used outside its episode contract (step after done,
    or no valid initial pose found)."""


class NumericFault(ArithmeticError):
    """A numeric operation produced NaN or Inf."""
