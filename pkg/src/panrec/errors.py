"""Exception taxonomy shared across the package."""


class PanrecError(Exception):
    """Base class for all panrec errors."""


class InvalidArgumentError(PanrecError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class BehindCameraError(InvalidArgumentError):
    """Projection was requested for a point at or behind the camera plane."""


class CapacityError(InvalidArgumentError):
    """A configured capacity limit (e.g. instance channels) was exceeded."""


class UndefinedIoUError(InvalidArgumentError):
    """IoU of two empty voxel sets is undefined."""


class ContractViolationError(PanrecError):
    """Two components disagree about a shared contract (site sets, channel
    counts, array shapes produced by a plugged-in predictor)."""


class FileFormatError(PanrecError):
    """A file exists but its contents do not match the expected format."""
