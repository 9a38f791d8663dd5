"""Exception types shared across the package.

Every error raised on purpose by this library derives from
:class:`ContourlabError`, so callers can catch one type at the boundary
(the CLI does exactly that) while tests can still distinguish the kinds.
"""


class ContourlabError(Exception):
    """Base class for all errors raised by contourlab."""


class ParseError(ContourlabError):
    """Malformed input text (pitch-track CSV, manifest JSON, contour JSON)."""


class ValidationError(ContourlabError):
    """Structurally parseable data that violates a documented invariant."""


class FeasibilityError(ContourlabError):
    """A sampling or training request the given corpus cannot satisfy."""


class FeatureError(ContourlabError):
    """A contour too short for statistical feature extraction."""


class CheckpointError(ContourlabError):
    """Unreadable, tampered, or version-incompatible checkpoint file."""


class TrainingError(ContourlabError):
    """Training aborted, e.g. a non-finite loss."""
