"""Exception hierarchy shared across the package."""


class CellSearchError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CellSearchError, ValueError):
    """Operands have incompatible shapes for a primitive."""

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shape_txt = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(CellSearchError, FloatingPointError):
    """A non-finite value reached a loss (or a training step)."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} [at {location}]"
        super().__init__(message)


class TapeError(CellSearchError, RuntimeError):
    """Misuse of the recording tape (double backward, non-scalar loss, ...)."""


class ConfigError(CellSearchError, ValueError):
    """Invalid configuration value or combination."""


class SearchSpaceError(CellSearchError, ValueError):
    """Invalid candidate set, alpha table, or pruning request."""


class GenotypeError(CellSearchError, ValueError):
    """Degenerate snapshot or invalid genotype."""


class RefinementError(GenotypeError):
    """Skip-connect refinement failed to converge within its iteration cap."""


class FormatError(CellSearchError, ValueError):
    """A file does not match its schema.

    ``field`` names the offending key (or byte offset for binary formats).
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
