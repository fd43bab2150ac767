"""Exception types shared across the package."""


class CoopnetError(Exception):
    """Base class for all package errors."""


class ShapeError(CoopnetError, ValueError):
    """Tensor extents or operand shapes are inconsistent."""


class GeometryError(CoopnetError, ValueError):
    """Convolution/deconvolution geometry does not work out to valid sizes."""


class ContractError(CoopnetError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class LabelError(CoopnetError, ValueError):
    """A class label falls outside its feature's cardinality."""


class SchemaError(CoopnetError, ValueError):
    """Feature vectors or label tuples do not match the feature schema."""


class FormatError(CoopnetError, ValueError):
    """A binary file (IDX, netpbm, checkpoint) is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(CoopnetError, ValueError):
    """An experiment configuration is invalid; message carries the key path."""


class DivergenceError(CoopnetError, RuntimeError):
    """Training produced a non-finite loss; carries the offending step metrics."""

    def __init__(self, message: str, metrics: dict | None = None):
        super().__init__(message)
        self.metrics = metrics or {}
