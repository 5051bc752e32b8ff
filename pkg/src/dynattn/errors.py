"""Exception types shared across the toolkit."""


class DynattnError(Exception):
    """Base class for all toolkit errors."""


class TrajectoryFormatError(DynattnError):
    """Base class for trajectory file/validation errors."""


class BadMagic(TrajectoryFormatError):
    pass


class UnsupportedVersion(TrajectoryFormatError):
    pass


class TruncatedPayload(TrajectoryFormatError):
    pass


class NonFiniteValue(TrajectoryFormatError):
    pass


class ShapeMismatch(TrajectoryFormatError):
    pass


class InvalidFieldValue(TrajectoryFormatError):
    """Finite but invalid field content (negative mass, bad role byte, eos_index != L)."""


class IndexOutOfRange(DynattnError):
    pass


class ConfigOutOfRange(DynattnError):
    pass


class InvalidParams(DynattnError):
    pass


class InvalidAxisValue(DynattnError):
    pass


class LengthMismatch(DynattnError):
    pass


class SingleClassDataset(DynattnError):
    pass


class DegenerateData(DynattnError):
    pass


class SolverStalled(DynattnError):
    pass


class NonFiniteState(DynattnError):
    pass
