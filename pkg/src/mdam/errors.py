"""Exception hierarchy. Each family maps to one CLI exit code."""


class MdamError(Exception):
    exit_code = 1

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), "exit_code": self.exit_code}


class ConfigError(MdamError, ValueError):
    exit_code = 2


class DataError(MdamError, ValueError):
    exit_code = 3


class InvalidTopologyError(DataError):
    pass


class SequenceValidationError(DataError):
    """Raised by ``validate_sequence``; ``kind`` is one of
    ``length-mismatch``, ``mask-drift``, ``grid-mismatch``, ``topology-mismatch``."""

    def __init__(self, kind, message, index=None):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.index = index

    def to_dict(self):
        d = super().to_dict()
        d.update(kind=self.kind, index=self.index)
        return d


class SchemaError(DataError):
    pass


class ChecksumError(DataError):
    pass


class MissingGroupError(DataError):
    pass


class MissingDecoderError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TransferIncompatibleError(DataError):
    pass


class ShapeError(MdamError, ValueError):
    exit_code = 3


class TapeError(MdamError, RuntimeError):
    pass


class NumericError(MdamError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass
