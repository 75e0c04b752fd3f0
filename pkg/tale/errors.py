"""Exception hierarchy shared by every module.

``InputError`` covers everything a caller can fix by changing inputs or configuration; the CLI
maps it to exit code 1. Everything else deriving from ``TaleError`` is a runtime failure.
"""


class TaleError(Exception):
    pass


class InputError(TaleError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DimensionError(InputError):
    pass


class DuplicateCodeError(InputError):
    pass


class UnknownCodeError(InputError):
    pass


class EmptySequenceError(InputError):
    pass


class OrderingError(InputError):
    pass


class MappingError(InputError):
    pass


class StabilityError(InputError):
    pass


class SplitSizeError(InputError):
    pass


class ShapeError(InputError):
    pass


class ContractError(InputError):
    pass


class DomainError(InputError):
    pass


class ConfigError(InputError):
    pass


class WeightError(InputError):
    pass


class UndefinedMetricError(InputError):
    pass


class EventIndexError(InputError, IndexError):
    pass


class EmptyHistoryError(TaleError):
    pass


class DeterminismError(TaleError):
    pass


class NonFiniteError(TaleError, FloatingPointError):
    pass


class TrainingError(TaleError):
    def __init__(self, message: str, group: str | None = None):
        self.group = group
        super().__init__(message)


class StateError(TaleError):
    pass
