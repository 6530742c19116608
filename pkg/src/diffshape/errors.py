"""Exception taxonomy shared across the package.

The command-line layer maps these onto process exit codes: validation
problems (bad inputs, malformed files, unknown config keys) exit 2,
numerical failures (divergence, conditioning, blow-up) exit 3, and I/O
problems exit 4.
"""


class DiffshapeError(Exception):
    """Base class for all package errors."""


class ValidationError(DiffshapeError):
    """Invalid arguments, malformed inputs, or violated preconditions."""


class MeshFormatError(ValidationError):
    """Unparseable mesh or landmark file; message carries path and line."""


class EmptyInputError(ValidationError):
    """An input that must be non-empty (mesh, dataset, point set) is empty."""


class ExtractionFailedError(ValidationError):
    """Cup extraction produced an empty mesh after filtering."""


class NumericalError(DiffshapeError):
    """Numerical failure: non-finite values, conditioning, divergence."""


class DivergenceError(NumericalError):
    """An iterative optimisation diverged or blew up."""


class ConditioningError(NumericalError):
    """A matrix factorisation failed even after jitter escalation."""
