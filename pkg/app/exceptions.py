"""
Error hierarchy for the articulation toolkit.

UsageError subclasses map to CLI exit code 1, DataError subclasses to
exit code 2. Anything else escaping a command is an internal error (3).
"""


class OamError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code = 3


class UsageError(OamError):
    """Bad flags, bad configuration values or bad call arguments"""

    exit_code = 1


class DataError(OamError):
    """Input files or in-memory records violate their contract"""

    exit_code = 2


# --- corpus ---

class UnsupportedFormat(DataError):
    pass


class CorruptFile(DataError):
    pass


class MissingTier(DataError):
    pass


class MalformedTextGrid(DataError):
    pass


class MalformedCsv(DataError):
    pass


class NonMonotonicIntervals(DataError):
    pass


class DuplicateId(DataError):
    pass


class MissingFile(DataError):
    pass


class InvalidInventory(DataError):
    pass


# --- segmenter / features ---

class InvalidWindow(UsageError):
    pass


class InvalidBand(UsageError):
    pass


class AlignmentMismatch(DataError):
    pass


# --- network ---

class ShapeMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class EmptyEvaluationSet(DataError):
    pass


class InvalidClass(UsageError):
    pass


# --- oam / analytics ---

class IndexOutOfRange(UsageError):
    pass


class EmptyInput(DataError):
    pass


class ZeroMean(DataError):
    pass


class ConstantInput(DataError):
    pass


class InsufficientData(DataError):
    pass


class DegenerateInput(DataError):
    pass


class NoOverlap(DataError):
    pass
