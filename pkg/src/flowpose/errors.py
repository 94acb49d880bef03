"""Exception types shared across the package."""


class FlowposeError(Exception):
    """Base class for all package-specific errors."""


class FormatError(FlowposeError):
    """A file or byte stream does not match its declared format."""


class ConfigError(FlowposeError):
    """A configuration is structurally invalid or violates an architectural rule."""


class TapeError(FlowposeError):
    """A gradient tape was used out of protocol (e.g. backward called twice)."""


class TrainingDiverged(FlowposeError):
    """The training loss became non-finite."""
