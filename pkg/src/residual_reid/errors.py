class ReidError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ReidError, ValueError):
    pass


class ShapeError(ReidError, ValueError):
    pass


class DatasetError(ReidError):
    """Missing files, malformed manifests, violated split invariants."""


class SamplingError(ReidError):
    pass


class CheckpointError(ReidError):
    pass


class DivergenceError(ReidError, FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
