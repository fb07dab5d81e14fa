"""Exception hierarchy.

Everything raised on bad *data* derives from :class:`GaproError` so callers
can catch one type at an I/O boundary.  Plain ``ValueError`` is reserved for
in-memory API misuse (wrong shapes, out-of-domain arguments).
"""


class GaproError(Exception):
    """Base class for errors raised on invalid input data or state."""


class FormatError(GaproError):
    """A file does not conform to its on-disk format."""


class GeometryError(GaproError):
    """Geometric inputs are inconsistent (bad box corners, id clashes)."""


class DegeneratePairError(GaproError):
    """An overlap pair has no determined training data on one side."""


class ConditioningError(GaproError):
    """A kernel matrix stayed non positive definite after jitter escalation."""

    def __init__(self, msg, length_scale=None, output_scale=None, n_train=None):
        super().__init__(msg)
        self.length_scale = length_scale
        self.output_scale = output_scale
        self.n_train = n_train


class GenerationError(GaproError):
    """A synthetic scene request cannot be satisfied."""
