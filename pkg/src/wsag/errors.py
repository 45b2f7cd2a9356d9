"""Exception taxonomy shared across the package.

Everything raised on purpose derives from WsagError so callers can catch one
base type at the CLI boundary and turn it into a diagnostic plus a nonzero
exit status.
"""


class WsagError(Exception):
    """Base class for all errors raised deliberately by this package."""


class InvalidArgument(WsagError, ValueError):
    """A caller violated a documented precondition."""


class NumericFault(WsagError, ArithmeticError):
    """A non-finite value appeared where finite arithmetic was promised.

    Attributes:
        layer: name of the pipeline stage that produced the bad value.
    """

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite values detected in {layer!r}")


class FormatError(WsagError, ValueError):
    """A binary or text artifact on disk does not match its documented layout.

    Attributes:
        offset: byte offset of the first inconsistency, when known.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(WsagError, ValueError):
    """A run configuration could not be parsed or failed validation.

    Attributes:
        key: the offending configuration key, when known.
    """

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"config key {key!r}: {message}"
        super().__init__(message)


class UnsatisfiableNegative(WsagError, ValueError):
    """Negative sampling is impossible (the pool holds only one task)."""


class GenerationFailure(WsagError, RuntimeError):
    """Rejection sampling in the synthetic generator exceeded its attempt cap."""


class UndefinedMetric(WsagError, ValueError):
    """A metric has no defined value on the given inputs."""
