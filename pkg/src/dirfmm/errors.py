"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class DirFMMError(Exception):
    exit_code = 1


class ConfigError(DirFMMError, ValueError):
    """Invalid configuration or input data."""

    exit_code = 2


class NumericalError(DirFMMError, ArithmeticError):
    """A numerical construction failed (rank cap, ill-conditioning, ...)."""

    exit_code = 3


class CacheFormatError(DirFMMError):
    exit_code = 2


class TransportError(DirFMMError):
    """Message delivery failed or timed out."""

    exit_code = 4


class ProtocolError(TransportError):
    """A worker is missing a record its schedule promised."""
