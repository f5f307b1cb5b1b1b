"""Exception hierarchy shared by every module."""


class PrivCompError(Exception):
    """Base class for all package errors."""


# field arithmetic
class NotPrime(PrivCompError, ValueError):
    pass


class DivisionByZero(PrivCompError, ZeroDivisionError):
    pass


class NotSquare(PrivCompError, ValueError):
    pass


class Singular(PrivCompError, ValueError):
    pass


class Inconsistent(PrivCompError, ValueError):
    """Linear system has no solution."""


# model / planner
class InvalidArgument(PrivCompError, ValueError):
    pass


class RankDeficient(PrivCompError, ValueError):
    pass


class IndexOutOfRange(PrivCompError, IndexError):
    pass


class AllocatorExhausted(PrivCompError, RuntimeError):
    pass


class MissingSource(PrivCompError, RuntimeError):
    pass


class SignConflict(PrivCompError, RuntimeError):
    """Sign propagation demanded two different signs for one symbol."""


# redundancy
class InvalidTuple(PrivCompError, ValueError):
    pass


class DimensionMismatch(PrivCompError, RuntimeError):
    pass


class FieldTooSmall(PrivCompError, ValueError):
    pass


# server / wire
class UnknownMessage(PrivCompError, ValueError):
    pass


class ShapeMismatch(PrivCompError, ValueError):
    pass


class MalformedFrame(PrivCompError, ValueError):
    pass


class VersionMismatch(PrivCompError, ValueError):
    pass


class ConfigMismatch(MalformedFrame):
    """Request header disagrees with the server's (p, N, K, M, L)."""


# client
class TransportError(PrivCompError, OSError):
    pass


class DecodeError(PrivCompError, RuntimeError):
    pass


class IncompleteAnswers(DecodeError):
    pass


# privacy / analysis / cli
class BudgetExceeded(PrivCompError, RuntimeError):
    pass


class InvalidProfile(PrivCompError, ValueError):
    pass


class ConfigError(PrivCompError, ValueError):
    pass


class FileError(PrivCompError, OSError):
    pass


class BindError(PrivCompError, OSError):
    pass
