"""Exception types shared across the package.

All subclass ValueError so callers that only care about "bad input" can
catch one thing; the distinct classes exist so tests and the CLI can tell
failure modes apart.
"""


class ValidationError(ValueError):
    """Input violates a documented invariant (range, overlap, ordering)."""


class TaxonomyError(ValidationError):
    """Label-space problem: bad partition, unknown class, missing region."""


class ShapeError(ValidationError):
    """Array dimensions disagree with the operation's contract."""


class BoundsError(ValidationError):
    """Frame index outside [0, T)."""


class FormatError(ValidationError):
    """File cannot be parsed as the advertised container format."""


class NumericError(ValidationError):
    """Non-finite value where a finite one is required."""
