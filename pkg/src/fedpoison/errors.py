class FedPoisonError(Exception):
    pass


class ConfigurationError(FedPoisonError, ValueError):
    """Invalid shapes, hyperparameters or experiment settings."""


class InputError(FedPoisonError, ValueError):
    """Data that cannot be processed (empty frames, bad labels, ...)."""


class NumericError(FedPoisonError, ArithmeticError):
    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class FormatError(FedPoisonError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


class RoundError(FedPoisonError):
    def __init__(self, message, device_id):
        super().__init__(f"device {device_id}: {message}")
        self.device_id = device_id
