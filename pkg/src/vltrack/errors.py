"""Exception types shared across the package.

CLI exit codes are attached to the families the command line reports.
"""


class VLTError(Exception):
    exit_code = 1


class DimensionError(VLTError, ValueError):
    """Operand shapes are incompatible."""


class GroupError(VLTError, ValueError):
    """Channel counts are not divisible by the requested group count."""


class RankError(VLTError, ValueError):
    """Operation requires a tensor of a different rank (e.g. scalar loss)."""


class NonFiniteError(VLTError, FloatingPointError):
    """A forward op produced NaN or Inf while finiteness checks are enabled."""


class EncodingError(VLTError, ValueError):
    pass


class GenomeError(VLTError, ValueError):
    """Genome has the wrong length or out-of-range genes, or failed to parse."""


class MetricError(VLTError, ValueError):
    pass


class ProbeError(VLTError, ValueError):
    pass


class ConfigError(VLTError, ValueError):
    exit_code = 3


class DataConflictError(VLTError):
    exit_code = 4


class CheckpointError(VLTError):
    """Checkpoint could not be read or does not fit the model it is loaded into."""

    exit_code = 3


class NumericAbort(VLTError):
    """Training diverged (non-finite loss)."""

    exit_code = 5
