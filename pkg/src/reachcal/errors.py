"""Exception types shared across the package."""


class ReachcalError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(ReachcalError):
    """Invalid configuration value or malformed config file."""


class SimulationFailure(ReachcalError):
    """Integration produced non-finite or diverging state."""


class FormatError(ReachcalError):
    """Corrupt or truncated binary artifact."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ReachcalError):
    """Non-finite values encountered in numeric computation."""


class TrainingError(ReachcalError):
    """Training loop diverged (NaN loss)."""


class DegenerateGridError(ReachcalError):
    """Calibration scores are all identical; no grid can be built."""


class CalibrationInfeasibleError(ReachcalError):
    """No candidate threshold reaches the required p-value budget."""


class StalenessError(ReachcalError):
    """Pipeline artifacts were produced from different inputs."""
