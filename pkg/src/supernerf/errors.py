"""Exception types shared across the package."""


class SuperNerfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SuperNerfError):
    """Invalid scene spec, training config, or precondition violation."""


class ShapeError(SuperNerfError):
    """Array shapes inconsistent with the requested operation."""


class NumericalStateError(SuperNerfError):
    """Parameters or losses became non-finite; training must halt."""


class DataIOError(SuperNerfError):
    """Missing, truncated, or malformed dataset / checkpoint files."""
