"""Exception hierarchy shared by the pipeline modules."""

from __future__ import annotations


class FingerprintError(Exception):
    """Base class for every error raised by the fingerprinting pipeline."""


class NetflowParseError(FingerprintError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CsvParseError(FingerprintError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class WhoisError(FingerprintError):
    pass


class CacheMissError(WhoisError, LookupError):
    def __init__(self, ip: object):
        super().__init__(f"no cached netrange covers {ip}")
        self.ip = ip


class ResolutionError(WhoisError):
    pass


class AmbiguousEndpointError(FingerprintError, ValueError):
    pass


class DimensionMismatchError(FingerprintError, ValueError):
    pass


class ConfigurationError(FingerprintError, ValueError):
    pass


class EmptyProfileError(FingerprintError):
    pass


class TrainingError(FingerprintError, ArithmeticError):
    pass
