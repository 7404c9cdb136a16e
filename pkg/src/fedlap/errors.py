"""Exception types shared across the package."""


class FedLapError(Exception):
    """Base class for all package errors."""


class ShapeError(FedLapError, ValueError):
    """Array dimensions disagree with the model or objective."""


class NumericError(FedLapError, ArithmeticError):
    """A loss, gradient or optimizer state became non-finite."""


class DataFormatError(FedLapError, ValueError):
    """An input file could not be parsed."""


class SplitError(FedLapError, ValueError):
    """A client partition could not be built."""


class StrategyError(FedLapError, RuntimeError):
    """A federated round could not be completed."""


class ConfigError(FedLapError, ValueError):
    """An experiment configuration is invalid."""


class WireError(FedLapError, ValueError):
    """A wire frame is malformed."""


class TransportError(FedLapError, ConnectionError):
    """A peer disconnected, timed out or broke the session protocol."""
