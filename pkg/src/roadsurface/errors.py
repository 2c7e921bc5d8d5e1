"""Exception hierarchy shared across the package."""


class RoadSurfaceError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RoadSurfaceError):
    """Tensor shapes or axes are incompatible with an operation."""


class ContractError(RoadSurfaceError):
    """A value-level precondition was violated (ranges, scalar-ness, ...)."""


class ConfigError(RoadSurfaceError):
    """A configuration object fails validation."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StackSpecError(RoadSurfaceError):
    """A stacking-spec string does not parse; carries the offending position."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class NumericsError(RoadSurfaceError):
    """A non-finite value appeared where finite math was required."""


class DecodeError(RoadSurfaceError):
    """An image byte stream could not be decoded."""


class DataError(RoadSurfaceError):
    """Dataset layout, class maps, or label remapping is inconsistent."""


class RemapError(DataError):
    """A fine class name carries no recognizable friction token."""


class IntegrityError(RoadSurfaceError):
    """A checkpoint file is corrupt or from an unsupported format version."""


class TrainAbort(RoadSurfaceError):
    """Training stopped on a numerical failure; names the offending step."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"training aborted at step {step}: {cause}")
